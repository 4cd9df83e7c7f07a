//! Occluded moving digits: a 14x14 digit flying over a 32x32 canvas behind
//! static occlusion bars, with the ground-truth-aligned optimal temporal
//! reconstruction used as the oracle baseline.

use super::digits::SMALL_SIDE;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const CANVAS: usize = 32;
pub const DEFAULT_STEPS: usize = 5;
/// Background (and occluder) intensity; bars erase digit pixels to this value.
pub const BACKGROUND: f64 = 0.0;

/// The eight admissible velocities, components in pixels per frame.
pub const VELOCITIES: [(i32, i32); 8] = [
    (1, 2),
    (1, -2),
    (-1, 2),
    (-1, -2),
    (2, 1),
    (2, -1),
    (-2, 1),
    (-2, -1),
];

const MAX_POS: i32 = (CANVAS - SMALL_SIDE) as i32; // 18

/// Static bar pattern: rows/columns r with r mod 12 in {8..11} are occluded,
/// so 4-wide bars alternate with 8 visible pixels, anchored visible at 0.
pub fn occlusion_mask() -> Vec<bool> {
    let occ = |i: usize| (i % 12) >= 8;
    (0..CANVAS * CANVAS)
        .map(|p| occ(p / CANVAS) || occ(p % CANVAS))
        .collect()
}

/// One generated sequence with full ground truth.
#[derive(Clone, Debug)]
pub struct OccSequence<T> {
    /// [T, 32, 32] observed frames in [0,1].
    pub frames: Tensor<T>,
    pub label: u8,
    /// the un-occluded 14x14 digit
    pub clean_digit: Tensor<T>,
    /// top-left (row, col) per step
    pub trajectory: Vec<(i32, i32)>,
    pub velocity: (i32, i32),
    /// static 32x32 occlusion pattern
    pub occlusion: Vec<bool>,
}

/// Renders frames from ground truth: digit pixels are copied onto the
/// background and occluded positions erased back to background.
pub fn render<T: Scalar>(clean: &Tensor<T>, trajectory: &[(i32, i32)], occlusion: &[bool]) -> Tensor<T> {
    let t = trajectory.len();
    let bg = T::from_f(BACKGROUND);
    let mut frames = Tensor::full(&[t, CANVAS, CANVAS], bg);
    for (step, &(r0, c0)) in trajectory.iter().enumerate() {
        let base = step * CANVAS * CANVAS;
        for dr in 0..SMALL_SIDE {
            for dc in 0..SMALL_SIDE {
                let (r, c) = (r0 as usize + dr, c0 as usize + dc);
                let p = r * CANVAS + c;
                if !occlusion[p] {
                    frames.data_mut()[base + p] = clean.data()[dr * SMALL_SIDE + dc];
                }
            }
        }
    }
    frames
}

fn bounce(pos: i32, vel: i32) -> (i32, i32) {
    let mut next = pos + vel;
    let mut v = vel;
    if next < 0 {
        next = -next;
        v = -v;
    } else if next > MAX_POS {
        next = 2 * MAX_POS - next;
        v = -v;
    }
    (next, v)
}

/// Uniform random start and velocity; deterministic billiard motion with
/// elastic reflection at the canvas edges.
pub fn generate_occ_sequence<T: Scalar>(
    rng: &mut ChaCha8Rng,
    clean_digit: &Tensor<T>,
    label: u8,
    steps: usize,
) -> Result<OccSequence<T>> {
    if clean_digit.shape() != [SMALL_SIDE, SMALL_SIDE] {
        return Err(Error::BadShape {
            op: "generate_occ_sequence",
            expected: "14x14 digit".into(),
            got: clean_digit.shape().to_vec(),
        });
    }
    let mut r = rng.random_range(0..=MAX_POS);
    let mut c = rng.random_range(0..=MAX_POS);
    let (mut vr, mut vc) = VELOCITIES[rng.random_range(0..VELOCITIES.len())];
    let velocity = (vr, vc);
    let mut trajectory = Vec::with_capacity(steps);
    for _ in 0..steps {
        trajectory.push((r, c));
        let (nr, nvr) = bounce(r, vr);
        let (nc, nvc) = bounce(c, vc);
        r = nr;
        vr = nvr;
        c = nc;
        vc = nvc;
    }
    let occlusion = occlusion_mask();
    let frames = render(clean_digit, &trajectory, &occlusion);
    Ok(OccSequence { frames, label, clean_digit: clean_digit.clone(), trajectory, velocity, occlusion })
}

/// Accumulates every digit pixel observed un-occluded in frames 0..=upto_t,
/// aligned into digit coordinates by the true trajectory. Unobserved pixels
/// keep the background value and are reported in the mask as false.
pub fn optimal_reconstruction<T: Scalar>(seq: &OccSequence<T>, upto_t: usize) -> (Tensor<T>, Vec<bool>) {
    let bg = T::from_f(BACKGROUND);
    let mut rec = Tensor::full(&[SMALL_SIDE, SMALL_SIDE], bg);
    let mut seen = vec![false; SMALL_SIDE * SMALL_SIDE];
    let hw = CANVAS * CANVAS;
    for (step, &(r0, c0)) in seq.trajectory.iter().enumerate().take(upto_t + 1) {
        for dr in 0..SMALL_SIDE {
            for dc in 0..SMALL_SIDE {
                let p = (r0 as usize + dr) * CANVAS + c0 as usize + dc;
                if !seq.occlusion[p] && !seen[dr * SMALL_SIDE + dc] {
                    seen[dr * SMALL_SIDE + dc] = true;
                    rec.data_mut()[dr * SMALL_SIDE + dc] = seq.frames.data()[step * hw + p];
                }
            }
        }
    }
    (rec, seen)
}
