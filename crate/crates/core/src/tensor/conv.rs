//! Cross-correlation on NCHW tensors via im2col and a GEMM backend.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size ceil(in/stride); symmetric padding with the extra
    /// pixel on the bottom/right for even kernels.
    Same,
    Valid,
}

/// (pad_before, pad_after) along one axis.
pub fn pad_amounts(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (total / 2, total - total / 2)
        }
    }
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => (input - kernel) / stride + 1,
        Padding::Same => input.div_ceil(stride),
    }
}

/// Layout of one convolution call; precomputed once and shared by the
/// forward and backward passes.
#[derive(Clone, Debug)]
pub struct ConvPlan {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: (usize, usize, usize, usize), // top, bottom, left, right
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvPlan {
    pub fn new<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        if x.shape().len() != 4 {
            return Err(Error::BadShape { op: "conv2d", expected: "NCHW input".into(), got: x.shape().to_vec() });
        }
        if k.shape().len() != 4 {
            return Err(Error::BadShape { op: "conv2d", expected: "FCKhKw kernel".into(), got: k.shape().to_vec() });
        }
        if stride == 0 {
            return Err(Error::InvalidArg { op: "conv2d", msg: "stride must be >= 1".into() });
        }
        let (n, c_in, h_in, w_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != c_in {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: x.shape().to_vec(), rhs: k.shape().to_vec() });
        }
        if padding == Padding::Valid && (kh > h_in || kw > w_in) {
            return Err(Error::InvalidArg {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than valid input {h_in}x{w_in}"),
            });
        }
        let (pt, pb) = pad_amounts(h_in, kh, stride, padding);
        let (pl, pr) = pad_amounts(w_in, kw, stride, padding);
        Ok(Self {
            batch: n,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            pad: (pt, pb, pl, pr),
            h_out: conv_out_dim(h_in, kh, stride, padding),
            w_out: conv_out_dim(w_in, kw, stride, padding),
        })
    }

    pub fn cols_rows(&self) -> usize {
        self.batch * self.h_out * self.w_out
    }

    pub fn cols_width(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Gathers input patches into a [rows, c_in*kh*kw] matrix.
    pub fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.cols_rows() * self.cols_width()];
        let width = self.cols_width();
        let (pt, _, pl, _) = self.pad;
        let plane = self.h_in * self.w_in;
        for n in 0..self.batch {
            let x_base = n * self.c_in * plane;
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let row = ((n * self.h_out + oy) * self.w_out + ox) * width;
                    let iy0 = (oy * self.stride) as isize - pt as isize;
                    let ix0 = (ox * self.stride) as isize - pl as isize;
                    for c in 0..self.c_in {
                        let cbase = x_base + c * plane;
                        let rbase = row + c * self.kh * self.kw;
                        for ky in 0..self.kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= self.h_in as isize {
                                continue;
                            }
                            let line = cbase + iy as usize * self.w_in;
                            for kx in 0..self.kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= self.w_in as isize {
                                    continue;
                                }
                                cols[rbase + ky * self.kw + kx] = x[line + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatters a [rows, c_in*kh*kw] gradient matrix back onto the input.
    pub fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.batch * self.c_in * self.h_in * self.w_in];
        let width = self.cols_width();
        let (pt, _, pl, _) = self.pad;
        let plane = self.h_in * self.w_in;
        for n in 0..self.batch {
            let x_base = n * self.c_in * plane;
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let row = ((n * self.h_out + oy) * self.w_out + ox) * width;
                    let iy0 = (oy * self.stride) as isize - pt as isize;
                    let ix0 = (ox * self.stride) as isize - pl as isize;
                    for c in 0..self.c_in {
                        let cbase = x_base + c * plane;
                        let rbase = row + c * self.kh * self.kw;
                        for ky in 0..self.kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= self.h_in as isize {
                                continue;
                            }
                            let line = cbase + iy as usize * self.w_in;
                            for kx in 0..self.kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= self.w_in as isize {
                                    continue;
                                }
                                dx[line + ix as usize] = dx[line + ix as usize] + cols[rbase + ky * self.kw + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// cols [rows, width] . kernelT [width, c_out] -> out in NHWC scratch,
    /// then transposed to NCHW.
    pub fn forward<T: Scalar>(&self, cols: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let rows = self.cols_rows();
        let width = self.cols_width();
        // kernel is [c_out, width]; GEMM wants B as [width, c_out], so transpose once.
        let mut kt = vec![T::zero(); width * self.c_out];
        for f in 0..self.c_out {
            for w in 0..width {
                kt[w * self.c_out + f] = kernel[f * width + w];
            }
        }
        let mut nhwc = vec![T::zero(); rows * self.c_out];
        T::gemm(rows, width, self.c_out, T::one(), cols, &kt, T::zero(), &mut nhwc);
        let mut out = vec![T::zero(); rows * self.c_out];
        let hw = self.h_out * self.w_out;
        for n in 0..self.batch {
            for p in 0..hw {
                let src = (n * hw + p) * self.c_out;
                for f in 0..self.c_out {
                    let mut v = nhwc[src + f];
                    if let Some(b) = bias {
                        v = v + b[f];
                    }
                    out[(n * self.c_out + f) * hw + p] = v;
                }
            }
        }
        out
    }

    /// Gradients of the GEMM formulation. Returns (d_cols, d_kernel, d_bias).
    pub fn backward<T: Scalar>(&self, cols: &[T], kernel: &[T], grad_out: &[T], want_dx: bool, want_dk: bool)
        -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
        let rows = self.cols_rows();
        let width = self.cols_width();
        let hw = self.h_out * self.w_out;
        // NCHW grad -> NHWC
        let mut gy = vec![T::zero(); rows * self.c_out];
        let mut db = vec![T::zero(); self.c_out];
        for n in 0..self.batch {
            for f in 0..self.c_out {
                for p in 0..hw {
                    let g = grad_out[(n * self.c_out + f) * hw + p];
                    gy[(n * hw + p) * self.c_out + f] = g;
                    db[f] = db[f] + g;
                }
            }
        }
        let d_cols = if want_dx {
            // dCols = gy [rows, c_out] . kernel [c_out, width]
            let mut dc = vec![T::zero(); rows * width];
            T::gemm(rows, self.c_out, width, T::one(), &gy, kernel, T::zero(), &mut dc);
            Some(dc)
        } else {
            None
        };
        let d_kernel = if want_dk {
            // dK = gy^T [c_out, rows] . cols [rows, width]
            let mut gyt = vec![T::zero(); self.c_out * rows];
            for r in 0..rows {
                for f in 0..self.c_out {
                    gyt[f * rows + r] = gy[r * self.c_out + f];
                }
            }
            let mut dk = vec![T::zero(); self.c_out * width];
            T::gemm(self.c_out, rows, width, T::one(), &gyt, cols, T::zero(), &mut dk);
            Some(dk)
        } else {
            None
        };
        (d_cols, d_kernel, db)
    }
}

/// Standalone forward convolution (no graph): used by inference paths.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new(x, k, stride, padding)?;
    let cols = plan.im2col(x.data());
    let out = plan.forward(&cols, k.data(), bias.map(|b| b.data()));
    Tensor::new(&[plan.batch, plan.c_out, plan.h_out, plan.w_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_splits_with_bottom_right_bias() {
        // even kernel: total pad 1 -> (0 before, 1 after)
        assert_eq!(pad_amounts(4, 2, 1, Padding::Same), (0, 1));
        // odd kernel: symmetric
        assert_eq!(pad_amounts(5, 3, 1, Padding::Same), (1, 1));
        assert_eq!(conv_out_dim(5, 3, 2, Padding::Same), 3);
        assert_eq!(conv_out_dim(4, 2, 2, Padding::Valid), 2);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let y = conv2d_forward(&x, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_patches() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = conv2d_forward(&x, &k, None, 2, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn kernel_channel_mismatch_is_reported_with_both_shapes() {
        let x = Tensor::<f64>::ones(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        let err = conv2d_forward(&x, &k, None, 1, Padding::Valid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 2, 2]"), "{msg}");
    }
}
