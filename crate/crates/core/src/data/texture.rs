//! Textured digits: a thickened digit silhouette filled with one oriented
//! sinusoidal grating over a background filled with another, drawn from a
//! 20-element texture family with per-sample random rotation and scale.

use super::digits::SMALL_SIDE;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TEXTURE_FAMILY: usize = 20;
pub const DEFAULT_TEXTURE_SIDE: usize = 20;

/// Base (orientation, wavelength) of texture `idx`: five orientations by
/// four wavelengths.
pub fn texture_base(idx: usize) -> (f64, f64) {
    let orient = (idx % 5) as f64 * std::f64::consts::PI / 5.0;
    let wavelength = [3.0, 4.5, 6.0, 8.0][idx / 5 % 4];
    (orient, wavelength)
}

fn grating(h: usize, w: usize, orient: f64, wavelength: f64, phase: f64) -> Vec<f64> {
    let (s, c) = orient.sin_cos();
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            0.5 + 0.4 * (std::f64::consts::TAU * (x * c + y * s) / wavelength + phase).sin()
        })
        .collect()
}

/// Digit shape: threshold then one-pixel dilation.
pub fn thickened_silhouette<T: Scalar>(digit: &Tensor<T>) -> Vec<bool> {
    let side = SMALL_SIDE;
    let thr = T::from_f(0.35);
    let base: Vec<bool> = digit.data().iter().map(|&v| v > thr).collect();
    let mut out = vec![false; side * side];
    for r in 0..side {
        for c in 0..side {
            'scan: for dr in -1i32..=1 {
                for dc in -1i32..=1 {
                    let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                    if rr >= 0 && rr < side as i32 && cc >= 0 && cc < side as i32 && base[rr as usize * side + cc as usize] {
                        out[r * side + c] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TexturedDigit<T> {
    pub image: Tensor<T>, // [side, side]
    pub label: u8,
    /// 0 = background, 1 = digit
    pub segmentation: Vec<u8>,
    pub digit_texture: usize,
    pub background_texture: usize,
}

/// Renders one textured digit on a `side`-pixel canvas. The digit and
/// background textures are distinct members of the 20-element family, each
/// randomly rotated and scaled.
pub fn generate_textured_digit<T: Scalar>(
    rng: &mut ChaCha8Rng,
    digit: &Tensor<T>,
    label: u8,
    side: usize,
) -> Result<TexturedDigit<T>> {
    if side < SMALL_SIDE {
        return Err(Error::InvalidArg {
            op: "generate_textured_digit",
            msg: format!("canvas {side} smaller than digit {SMALL_SIDE}"),
        });
    }
    let silhouette = thickened_silhouette(digit);
    let digit_texture = rng.random_range(0..TEXTURE_FAMILY);
    let mut background_texture = rng.random_range(0..TEXTURE_FAMILY - 1);
    if background_texture >= digit_texture {
        background_texture += 1;
    }
    let tex = |idx: usize, r: &mut ChaCha8Rng| {
        let (orient, wavelength) = texture_base(idx);
        grating(
            side,
            side,
            orient + r.random_range(-0.3..0.3),
            wavelength * r.random_range(0.85..1.2),
            r.random_range(0.0..std::f64::consts::TAU),
        )
    };
    let fg = tex(digit_texture, rng);
    let bg = tex(background_texture, rng);
    let max_off = side - SMALL_SIDE;
    let (r0, c0) = (rng.random_range(0..=max_off), rng.random_range(0..=max_off));
    let mut segmentation = vec![0u8; side * side];
    for r in 0..SMALL_SIDE {
        for c in 0..SMALL_SIDE {
            if silhouette[r * SMALL_SIDE + c] {
                segmentation[(r0 + r) * side + c0 + c] = 1;
            }
        }
    }
    let image = Tensor::from_fn(&[side, side], |p| {
        T::from_f(if segmentation[p] == 1 { fg[p] } else { bg[p] })
    });
    Ok(TexturedDigit { image, label, segmentation, digit_texture, background_texture })
}
