//! Forward builders and backward rules for every graph op.

use super::conv::{ConvPlan, Padding};
use super::graph::{AxisView, Graph, Op, Var};
use super::{same_shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

pub(crate) const NORM_EPS: f64 = 1e-5;
const PROB_EPS: f64 = 1e-12;

/// Batch-norm mode: train computes batch statistics, eval consumes stored
/// running statistics.
#[derive(Clone, Debug)]
pub enum BnMode<T> {
    Train,
    Eval { mean: Vec<T>, var: Vec<T> },
}

fn axis_view(shape: &[usize], axis: usize) -> AxisView {
    AxisView {
        outer: shape[..axis].iter().product(),
        mid: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

/// Broadcast view for a per-channel / per-feature parameter against `shape`:
/// [N,C,...] with p[C], [N,D] with p[D], or p[1] against anything.
fn broadcast_view(op: &'static str, shape: &[usize], plen: usize) -> Result<AxisView> {
    let n: usize = shape.iter().product();
    if plen == 1 {
        return Ok(AxisView { outer: 1, mid: 1, inner: n });
    }
    if shape.len() >= 2 && shape[1] == plen {
        return Ok(axis_view(shape, 1));
    }
    if shape.len() == 1 && shape[0] == plen {
        return Ok(AxisView { outer: 1, mid: plen, inner: 1 });
    }
    Err(Error::ShapeMismatch { op, lhs: shape.to_vec(), rhs: vec![plen] })
}

impl<T: Scalar> Graph<T> {
    fn zip_op(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        same_shape(op_name, self.value(a), self.value(b))?;
        let out = Tensor::from_fn(self.value(a).shape(), |i| {
            f(self.value(a).data()[i], self.value(b).data()[i])
        });
        Ok((out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.zip_op("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.zip_op("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.zip_op("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.zip_op("max_elem", a, b, |x, y| if x >= y { x } else { y })?;
        Ok(self.push(out, Op::MaxElem(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a, c), rg)
    }

    /// Elementwise multiply by a per-channel (4-D) or per-feature (2-D)
    /// parameter vector; a length-1 parameter broadcasts everywhere.
    pub fn bmul(&mut self, x: Var, p: Var) -> Result<Var> {
        let view = broadcast_view("bmul", self.value(x).shape(), self.value(p).len())?;
        let out = self.broadcast_apply(x, p, view, |a, b| a * b);
        let rg = self.rg(x) || self.rg(p);
        Ok(self.push(out, Op::BMul(x, p, view), rg))
    }

    pub fn badd(&mut self, x: Var, p: Var) -> Result<Var> {
        let view = broadcast_view("badd", self.value(x).shape(), self.value(p).len())?;
        let out = self.broadcast_apply(x, p, view, |a, b| a + b);
        let rg = self.rg(x) || self.rg(p);
        Ok(self.push(out, Op::BAdd(x, p, view), rg))
    }

    fn broadcast_apply(&self, x: Var, p: Var, view: AxisView, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let xd = self.value(x).data();
        let pd = self.value(p).data();
        let mut out = vec![T::zero(); xd.len()];
        let AxisView { outer, mid, inner } = view;
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let pv = pd[m % pd.len().max(1)];
                for i in 0..inner {
                    out[base + i] = f(xd[base + i], pv);
                }
            }
        }
        Tensor::new(self.value(x).shape(), out).expect("broadcast shape")
    }

    /// Dense map: x[N,I] . wᵀ[I,O] + b[O] -> [N,O].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch { op: "affine", lhs: xs, rhs: ws });
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if self.value(b).len() != o {
            return Err(Error::ShapeMismatch { op: "affine bias", lhs: vec![o], rhs: self.value(b).shape().to_vec() });
        }
        // out = x . wT
        let mut wt = vec![T::zero(); i * o];
        for r in 0..o {
            for c in 0..i {
                wt[c * o + r] = self.value(w).data()[r * i + c];
            }
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, i, o, T::one(), self.value(x).data(), &wt, T::zero(), &mut out);
        for row in 0..n {
            for c in 0..o {
                out[row * o + c] = out[row * o + c] + self.value(b).data()[c];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Affine { x, w, b }, rg))
    }

    /// Cross-correlation (no kernel flip) of NCHW input with FCKhKw kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let plan = ConvPlan::new(self.value(x), self.value(k), stride, padding)?;
        if let Some(bv) = b {
            if self.value(bv).len() != plan.c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![plan.c_out],
                    rhs: self.value(bv).shape().to_vec(),
                });
            }
        }
        let cols = plan.im2col(self.value(x).data());
        let out = plan.forward(&cols, self.value(k).data(), b.map(|bv| self.value(bv).data()));
        let shape = [plan.batch, plan.c_out, plan.h_out, plan.w_out];
        let rg = self.rg(x) || self.rg(k) || b.map(|bv| self.rg(bv)).unwrap_or(false);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, k, b, plan, cols }, rg))
    }

    pub fn max_pool(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] < kh || s[3] < kw {
            return Err(Error::BadShape { op: "max_pool", expected: format!("NCHW with H>={kh}, W>={kw}"), got: s });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut arg = 0u32;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                            if xd[idx] > best {
                                best = xd[idx];
                                arg = idx as u32;
                            }
                        }
                    }
                    let o = (nc * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] < kh || s[3] < kw {
            return Err(Error::BadShape { op: "avg_pool", expected: format!("NCHW with H>={kh}, W>={kw}"), got: s });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let inv = T::from_f(1.0 / (kh * kw) as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc = acc + xd[base + (oy * stride + ky) * w + (ox * stride + kx)];
                        }
                    }
                    out[(nc * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::AvgPool { x, kh, kw, stride }, rg))
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::BadShape { op: "upsample", expected: "NCHW, factor >= 1".into(), got: s });
        }
        if factor == 1 {
            return self.reshape(x, &s);
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            for y in 0..ho {
                for xcol in 0..wo {
                    out[(nc * ho + y) * wo + xcol] = xd[(nc * h + y / factor) * w + xcol / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::UpsampleNearest { x, factor }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    /// Natural log with the argument clamped to a tiny positive floor.
    pub fn ln(&mut self, x: Var) -> Var {
        let eps = T::from_f(PROB_EPS);
        let out = self.value(x).map(|v| v.max(eps).ln());
        let rg = self.rg(x);
        self.push(out, Op::Ln(x), rg)
    }

    /// Softmax along `axis`; rows of the view sum to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg { op: "softmax", msg: format!("axis {axis} of {shape:?}") });
        }
        let view = axis_view(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let AxisView { outer, mid, inner } = view;
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = T::neg_infinity();
                for m in 0..mid {
                    mx = mx.max(xd[at(m)]);
                }
                let mut z = T::zero();
                for m in 0..mid {
                    let e = (xd[at(m)] - mx).exp();
                    out[at(m)] = e;
                    z = z + e;
                }
                for m in 0..mid {
                    out[at(m)] = out[at(m)] / z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, view }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg { op: "concat", msg: "empty input list".into() });
        }
        let first = self.value(xs[0]).shape().to_vec();
        let mut mid_total = 0usize;
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            parts.push((v, s[axis]));
            mid_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = mid_total;
        let view = axis_view(&shape, axis);
        let AxisView { outer, inner, .. } = view;
        let mut out = vec![T::zero(); outer * mid_total * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for &(v, m) in &parts {
                let src = self.value(v).data();
                let chunk = m * inner;
                out[(o * mid_total + off) * inner..][..chunk]
                    .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
                off += m;
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { xs: parts, view }, rg))
    }

    /// Slice of width `len` starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArg {
                op: "narrow",
                msg: format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            });
        }
        let view = axis_view(&shape, axis);
        let AxisView { outer, mid, inner } = view;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Narrow { x, view, start, len }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_f(self.value(x).len() as f64);
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), rg)
    }

    /// Batch normalization per channel (4-D input normalizes over N,H,W; 2-D
    /// over N). In train mode returns the batch (mean, variance) so the
    /// caller can fold them into running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let shape = self.value(x).shape().to_vec();
        let c = if shape.len() == 4 { shape[1] } else if shape.len() == 2 { shape[1] } else {
            return Err(Error::BadShape { op: "batch_norm", expected: "NCHW or ND".into(), got: shape });
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch { op: "batch_norm affine", lhs: vec![c], rhs: self.value(gamma).shape().to_vec() });
        }
        let view = broadcast_view("batch_norm", &shape, c)?;
        let AxisView { outer, mid, inner } = view;
        let m = outer * inner;
        if m == 1 && matches!(mode, BnMode::Train) {
            log::warn!("batch_norm: batch of size 1 in train mode; variance clamped by epsilon");
        }
        let eps = T::from_f(NORM_EPS);
        let xd = self.value(x).data();
        let (mean, var, frozen) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); mid];
                let mut var = vec![T::zero(); mid];
                let inv_m = T::from_f(1.0 / m as f64);
                for ch in 0..mid {
                    let mut s = T::zero();
                    for o in 0..outer {
                        let base = (o * mid + ch) * inner;
                        for i in 0..inner {
                            s = s + xd[base + i];
                        }
                    }
                    mean[ch] = s * inv_m;
                    let mut v = T::zero();
                    for o in 0..outer {
                        let base = (o * mid + ch) * inner;
                        for i in 0..inner {
                            let d = xd[base + i] - mean[ch];
                            v = v + d * d;
                        }
                    }
                    var[ch] = v * inv_m;
                }
                (mean, var, false)
            }
            BnMode::Eval { mean, var } => (mean, var, true),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        for o in 0..outer {
            for ch in 0..mid {
                let base = (o * mid + ch) * inner;
                for i in 0..inner {
                    let xh = (xd[base + i] - mean[ch]) * inv_std[ch];
                    x_hat[base + i] = xh;
                    out[base + i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = if frozen { None } else { Some((mean, var.clone())) };
        let node = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, frozen },
            rg,
        );
        Ok((node, stats))
    }

    /// Layer normalization over all non-batch dimensions of each sample, with
    /// per-channel (4-D) or per-feature (2-D) gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::BadShape { op: "layer_norm", expected: "at least 2-D".into(), got: shape });
        }
        let n = shape[0];
        let m: usize = shape[1..].iter().product();
        let c = shape[1];
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::ShapeMismatch { op: "layer_norm affine", lhs: vec![c], rhs: self.value(gain).shape().to_vec() });
        }
        let eps = T::from_f(NORM_EPS);
        let inv_m = T::from_f(1.0 / m as f64);
        let xd = self.value(x).data();
        let mut x_hat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); xd.len()];
        let inner: usize = shape[2..].iter().product();
        let gd = self.value(gain).data().to_vec();
        let bd = self.value(bias).data().to_vec();
        for s in 0..n {
            let base = s * m;
            let mut mean = T::zero();
            for i in 0..m {
                mean = mean + xd[base + i];
            }
            mean = mean * inv_m;
            let mut var = T::zero();
            for i in 0..m {
                let d = xd[base + i] - mean;
                var = var + d * d;
            }
            var = var * inv_m;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[s] = istd;
            for i in 0..m {
                let xh = (xd[base + i] - mean) * istd;
                x_hat[base + i] = xh;
                let ch = i / inner.max(1) % c;
                out[base + i] = gd[ch] * xh + bd[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gain, bias, x_hat, inv_std }, rg))
    }

    /// Mean over the batch of -log p[n, target_n]; `p` holds probabilities.
    pub fn cross_entropy(&mut self, p: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.value(p).shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::BadShape {
                op: "cross_entropy",
                expected: format!("[{}, K] probabilities", targets.len()),
                got: shape,
            });
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArg { op: "cross_entropy", msg: format!("target {bad} out of {k} classes") });
        }
        let eps = T::from_f(PROB_EPS);
        let pd = self.value(p).data();
        let mut loss = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            loss = loss - (pd[row * k + t].max(eps)).ln();
        }
        loss = loss / T::from_f(n as f64);
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { p, targets: targets.to_vec() }, rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse_loss", self.value(a), self.value(b))?;
        let n = T::from_f(self.value(a).len() as f64);
        let mut s = T::zero();
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x - y;
            s = s + d * d;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::MseLoss { a, b }, rg))
    }

    /// Mean over all elements of -[x log p + (1-x) log(1-p)].
    pub fn bernoulli_nll(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("bernoulli_nll", self.value(p), target)?;
        let eps = T::from_f(PROB_EPS);
        let one = T::one();
        let n = T::from_f(target.len() as f64);
        let mut s = T::zero();
        for (&pv, &x) in self.value(p).data().iter().zip(target.data()) {
            let pc = pv.max(eps).min(one - eps);
            s = s - (x * pc.ln() + (one - x) * (one - pc).ln());
        }
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(s / n), Op::BernoulliNll { p, target: target.clone() }, rg))
    }

    /// Per-pixel Gaussian mixture negative log-likelihood, averaged over
    /// batch and pixels: -log sum_k pi_k N(x; mu_k, sigma_k^2).
    ///
    /// `pi`, `mu`: [N,K,H,W]; `log_var`: [K]; `target`: [N,1,H,W].
    pub fn mixture_nll(&mut self, pi: Var, mu: Var, log_var: Var, target: &Tensor<T>) -> Result<Var> {
        let ps = self.value(pi).shape().to_vec();
        same_shape("mixture_nll pi/mu", self.value(pi), self.value(mu))?;
        if ps.len() != 4 || target.shape().len() != 4 || target.shape()[1] != 1
            || target.shape()[0] != ps[0] || target.shape()[2] != ps[2] || target.shape()[3] != ps[3]
        {
            return Err(Error::ShapeMismatch { op: "mixture_nll", lhs: ps, rhs: target.shape().to_vec() });
        }
        let k = ps[1];
        if self.value(log_var).len() != k {
            return Err(Error::ShapeMismatch { op: "mixture_nll log_var", lhs: vec![k], rhs: self.value(log_var).shape().to_vec() });
        }
        let (n, hw) = (ps[0], ps[2] * ps[3]);
        let two_pi = T::from_f(std::f64::consts::TAU);
        let lv = self.value(log_var).data().to_vec();
        let vars: Vec<T> = lv.iter().map(|&v| v.exp()).collect();
        let pd = self.value(pi).data();
        let md = self.value(mu).data();
        let td = target.data();
        let eps = T::from_f(PROB_EPS);
        let mut total = T::zero();
        for s in 0..n {
            for p in 0..hw {
                let x = td[s * hw + p];
                let mut lik = T::zero();
                for g in 0..k {
                    let idx = (s * k + g) * hw + p;
                    let d = x - md[idx];
                    let pdf = (-(d * d) / (vars[g] + vars[g])).exp() / (two_pi * vars[g]).sqrt();
                    lik = lik + pd[idx] * pdf;
                }
                total = total - lik.max(eps).ln();
            }
        }
        total = total / T::from_f((n * hw) as f64);
        let rg = self.rg(pi) || self.rg(mu) || self.rg(log_var);
        Ok(self.push(Tensor::scalar(total), Op::MixtureNll { pi, mu, log_var, target: target.clone() }, rg))
    }
}

// ── backward ───────────────────────────────────────────────────────────────

impl<T: Scalar> Graph<T> {
    pub(crate) fn backprop_node(&mut self, i: usize) {
        let grad = self.nodes[i].grad.as_ref().expect("grad present").clone();
        let g = grad.data();
        // Op clone is cheap for most ops; conv cols and norm caches are moved
        // back afterwards untouched (they are read-only here).
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d: Vec<T> = g.iter().zip(self.value(*b).data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(*a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<T> = g.iter().zip(self.value(*a).data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::MaxElem(a, b) => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                let da: Vec<T> = g.iter().enumerate().map(|(j, &gv)| if av[j] >= bv[j] { gv } else { T::zero() }).collect();
                let db: Vec<T> = g.iter().enumerate().map(|(j, &gv)| if av[j] >= bv[j] { T::zero() } else { gv }).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale(a, c) => {
                let d: Vec<T> = g.iter().map(|&v| v * *c).collect();
                self.accumulate(*a, &d);
            }
            Op::AddConst(a, _) => self.accumulate(*a, g),
            Op::BMul(x, p, view) => {
                let AxisView { outer, mid, inner } = *view;
                let pd = self.value(*p).data().to_vec();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i2 in 0..inner {
                                dx[base + i2] = g[base + i2] * pd[m % pd.len()];
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                if self.rg(*p) {
                    let xd = self.value(*x).data();
                    let plen = pd.len();
                    let mut dp = vec![T::zero(); plen];
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i2 in 0..inner {
                                dp[m % plen] = dp[m % plen] + g[base + i2] * xd[base + i2];
                            }
                        }
                    }
                    self.accumulate(*p, &dp);
                }
            }
            Op::BAdd(x, p, view) => {
                self.accumulate(*x, g);
                if self.rg(*p) {
                    let AxisView { outer, mid, inner } = *view;
                    let plen = self.value(*p).len();
                    let mut dp = vec![T::zero(); plen];
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i2 in 0..inner {
                                dp[m % plen] = dp[m % plen] + g[base + i2];
                            }
                        }
                    }
                    self.accumulate(*p, &dp);
                }
            }
            Op::Affine { x, w, b } => {
                let (n, in_dim) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                if self.rg(*x) {
                    // dx = g [n,o] . w [o,in]
                    let mut dx = vec![T::zero(); n * in_dim];
                    T::gemm(n, o, in_dim, T::one(), g, self.value(*w).data(), T::zero(), &mut dx);
                    self.accumulate(*x, &dx);
                }
                if self.rg(*w) {
                    // dw = gT [o,n] . x [n,in]
                    let mut gt = vec![T::zero(); o * n];
                    for r in 0..n {
                        for c in 0..o {
                            gt[c * n + r] = g[r * o + c];
                        }
                    }
                    let mut dw = vec![T::zero(); o * in_dim];
                    T::gemm(o, n, in_dim, T::one(), &gt, self.value(*x).data(), T::zero(), &mut dw);
                    self.accumulate(*w, &dw);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); o];
                    for r in 0..n {
                        for c in 0..o {
                            db[c] = db[c] + g[r * o + c];
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Conv2d { x, k, b, plan, cols } => {
                let (d_cols, d_kernel, db) =
                    plan.backward(cols, self.value(*k).data(), g, self.rg(*x), self.rg(*k));
                if let Some(dc) = d_cols {
                    let dx = plan.col2im(&dc);
                    self.accumulate(*x, &dx);
                }
                if let Some(dk) = d_kernel {
                    self.accumulate(*k, &dk);
                }
                if let Some(bv) = b {
                    self.accumulate(*bv, &db);
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (j, &a) in argmax.iter().enumerate() {
                    dx[a as usize] = dx[a as usize] + g[j];
                }
                self.accumulate(*x, &dx);
            }
            Op::AvgPool { x, kh, kw, stride } => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
                let inv = T::from_f(1.0 / (kh * kw) as f64);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(nc * ho + oy) * wo + ox] * inv;
                            for ky in 0..*kh {
                                for kx in 0..*kw {
                                    let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                                    dx[idx] = dx[idx] + gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::UpsampleNearest { x, factor } => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for nc in 0..n * c {
                    for y in 0..ho {
                        for xcol in 0..wo {
                            let src = (nc * h + y / factor) * w + xcol / factor;
                            dx[src] = dx[src] + g[(nc * ho + y) * wo + xcol];
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let d: Vec<T> = g.iter().zip(&y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                self.accumulate(*x, &d);
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let d: Vec<T> = g.iter().zip(&y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect();
                self.accumulate(*x, &d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                let d: Vec<T> = g.iter().zip(&xv).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }).collect();
                self.accumulate(*x, &d);
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let d: Vec<T> = g.iter().zip(&y).map(|(&gv, &yv)| gv * yv).collect();
                self.accumulate(*x, &d);
            }
            Op::Ln(x) => {
                let eps = T::from_f(PROB_EPS);
                let xv = self.value(*x).data().to_vec();
                let d: Vec<T> = g.iter().zip(&xv).map(|(&gv, &v)| gv / v.max(eps)).collect();
                self.accumulate(*x, &d);
            }
            Op::Softmax { x, view } => {
                let y = self.nodes[i].value.data().to_vec();
                let AxisView { outer, mid, inner } = *view;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |m: usize| (o * mid + m) * inner + i2;
                        let mut dot = T::zero();
                        for m in 0..mid {
                            dot = dot + g[at(m)] * y[at(m)];
                        }
                        for m in 0..mid {
                            dx[at(m)] = y[at(m)] * (g[at(m)] - dot);
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Concat { xs, view } => {
                let AxisView { outer, mid, inner } = *view;
                let mut off = 0usize;
                for &(v, m) in xs {
                    if self.rg(v) {
                        let mut dv = vec![T::zero(); outer * m * inner];
                        for o in 0..outer {
                            let src = (o * mid + off) * inner;
                            dv[o * m * inner..(o + 1) * m * inner]
                                .copy_from_slice(&g[src..src + m * inner]);
                        }
                        self.accumulate(v, &dv);
                    }
                    off += m;
                }
            }
            Op::Narrow { x, view, start, len } => {
                let AxisView { outer, mid, inner } = *view;
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(*x, &dx);
            }
            Op::Reshape { x } => self.accumulate(*x, g),
            Op::SumAll(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                self.accumulate(*x, &d);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / T::from_f(n as f64); n];
                self.accumulate(*x, &d);
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, frozen } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let view = broadcast_view("bn", &shape, inv_std.len()).expect("bn view");
                let AxisView { outer, mid, inner } = view;
                let m = outer * inner;
                let gd = self.value(*gamma).data().to_vec();
                if self.rg(*gamma) {
                    let mut dgamma = vec![T::zero(); mid];
                    for o in 0..outer {
                        for ch in 0..mid {
                            let base = (o * mid + ch) * inner;
                            for i2 in 0..inner {
                                dgamma[ch] = dgamma[ch] + g[base + i2] * x_hat[base + i2];
                            }
                        }
                    }
                    self.accumulate(*gamma, &dgamma);
                }
                if self.rg(*beta) {
                    let mut dbeta = vec![T::zero(); mid];
                    for o in 0..outer {
                        for ch in 0..mid {
                            let base = (o * mid + ch) * inner;
                            for i2 in 0..inner {
                                dbeta[ch] = dbeta[ch] + g[base + i2];
                            }
                        }
                    }
                    self.accumulate(*beta, &dbeta);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *frozen {
                        for o in 0..outer {
                            for ch in 0..mid {
                                let base = (o * mid + ch) * inner;
                                for i2 in 0..inner {
                                    dx[base + i2] = g[base + i2] * gd[ch] * inv_std[ch];
                                }
                            }
                        }
                    } else {
                        let inv_m = T::from_f(1.0 / m as f64);
                        for ch in 0..mid {
                            let mut sum_dxh = T::zero();
                            let mut sum_dxh_xh = T::zero();
                            for o in 0..outer {
                                let base = (o * mid + ch) * inner;
                                for i2 in 0..inner {
                                    let dxh = g[base + i2] * gd[ch];
                                    sum_dxh = sum_dxh + dxh;
                                    sum_dxh_xh = sum_dxh_xh + dxh * x_hat[base + i2];
                                }
                            }
                            for o in 0..outer {
                                let base = (o * mid + ch) * inner;
                                for i2 in 0..inner {
                                    let dxh = g[base + i2] * gd[ch];
                                    dx[base + i2] = inv_std[ch]
                                        * (dxh - inv_m * sum_dxh - x_hat[base + i2] * inv_m * sum_dxh_xh);
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, x_hat, inv_std } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let n = shape[0];
                let m: usize = shape[1..].iter().product();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product::<usize>().max(1);
                let gd = self.value(*gain).data().to_vec();
                if self.rg(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for s in 0..n {
                        for i2 in 0..m {
                            dg[i2 / inner % c] = dg[i2 / inner % c] + g[s * m + i2] * x_hat[s * m + i2];
                        }
                    }
                    self.accumulate(*gain, &dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); c];
                    for s in 0..n {
                        for i2 in 0..m {
                            db[i2 / inner % c] = db[i2 / inner % c] + g[s * m + i2];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
                if self.rg(*x) {
                    let inv_m = T::from_f(1.0 / m as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        let base = s * m;
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for i2 in 0..m {
                            let dxh = g[base + i2] * gd[i2 / inner % c];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * x_hat[base + i2];
                        }
                        for i2 in 0..m {
                            let dxh = g[base + i2] * gd[i2 / inner % c];
                            dx[base + i2] = inv_std[s]
                                * (dxh - inv_m * sum_dxh - x_hat[base + i2] * inv_m * sum_dxh_xh);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }
            Op::CrossEntropy { p, targets } => {
                let k = self.value(*p).shape()[1];
                let n = targets.len();
                let eps = T::from_f(PROB_EPS);
                let pd = self.value(*p).data().to_vec();
                let mut dp = vec![T::zero(); pd.len()];
                let scale = g[0] / T::from_f(n as f64);
                for (row, &t) in targets.iter().enumerate() {
                    let pv = pd[row * k + t].max(eps);
                    dp[row * k + t] = -scale / pv;
                }
                self.accumulate(*p, &dp);
            }
            Op::MseLoss { a, b } => {
                let n = T::from_f(self.value(*a).len() as f64);
                let scale = g[0] * T::from_f(2.0) / n;
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if self.rg(*a) {
                    let d: Vec<T> = av.iter().zip(&bv).map(|(&x, &y)| scale * (x - y)).collect();
                    self.accumulate(*a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<T> = av.iter().zip(&bv).map(|(&x, &y)| -scale * (x - y)).collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::BernoulliNll { p, target } => {
                let eps = T::from_f(PROB_EPS);
                let one = T::one();
                let n = T::from_f(target.len() as f64);
                let scale = g[0] / n;
                let pd = self.value(*p).data().to_vec();
                let d: Vec<T> = pd
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &x)| {
                        let pc = pv.max(eps).min(one - eps);
                        scale * (-x / pc + (one - x) / (one - pc))
                    })
                    .collect();
                self.accumulate(*p, &d);
            }
            Op::MixtureNll { pi, mu, log_var, target } => {
                let ps = self.value(*pi).shape().to_vec();
                let (n, k, hw) = (ps[0], ps[1], ps[2] * ps[3]);
                let lv = self.value(*log_var).data().to_vec();
                let vars: Vec<T> = lv.iter().map(|&v| v.exp()).collect();
                let two_pi = T::from_f(std::f64::consts::TAU);
                let eps = T::from_f(PROB_EPS);
                let half = T::from_f(0.5);
                let pd = self.value(*pi).data().to_vec();
                let md = self.value(*mu).data().to_vec();
                let td = target.data();
                let scale = g[0] / T::from_f((n * hw) as f64);
                let mut dpi = vec![T::zero(); pd.len()];
                let mut dmu = vec![T::zero(); md.len()];
                let mut dlv = vec![T::zero(); k];
                for s in 0..n {
                    for p in 0..hw {
                        let x = td[s * hw + p];
                        let mut pdfs = vec![T::zero(); k];
                        let mut lik = T::zero();
                        for gix in 0..k {
                            let idx = (s * k + gix) * hw + p;
                            let d = x - md[idx];
                            let pdf = (-(d * d) / (vars[gix] + vars[gix])).exp() / (two_pi * vars[gix]).sqrt();
                            pdfs[gix] = pdf;
                            lik = lik + pd[idx] * pdf;
                        }
                        let lik = lik.max(eps);
                        for gix in 0..k {
                            let idx = (s * k + gix) * hw + p;
                            let resp = pd[idx] * pdfs[gix] / lik;
                            dpi[idx] = -scale * pdfs[gix] / lik;
                            let d = x - md[idx];
                            dmu[idx] = -scale * resp * d / vars[gix];
                            // d/dlogvar of log N = ((x-mu)^2/var - 1)/2
                            dlv[gix] = dlv[gix] - scale * resp * half * (d * d / vars[gix] - T::one());
                        }
                    }
                }
                self.accumulate(*pi, &dpi);
                self.accumulate(*mu, &dmu);
                self.accumulate(*log_var, &dlv);
            }
        }
        self.nodes[i].op = op;
    }
}
