//! Digit sources: an IDX-format loader for the standard handwritten-digit
//! files, and a deterministic procedural fallback pool of 500 stroke-rendered
//! digits (50 per class) for fully offline runs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

pub const DIGIT_SIDE: usize = 28;
pub const SMALL_SIDE: usize = 14;

/// Seed and version of the bundled fallback pool; bump the version when the
/// renderer changes so datasets regenerate rather than mix generations.
pub const FALLBACK_SEED: u64 = 0x5EED_D161;
pub const FALLBACK_PER_CLASS: usize = 50;

/// A labelled pool of 28x28 digits split into disjoint train/val/test sets.
#[derive(Clone, Debug)]
pub struct DigitPool<T> {
    pub images: Vec<Tensor<T>>, // 28x28, values in [0,1]
    pub labels: Vec<u8>,
    /// index ranges per split: (train, val, test), disjoint
    pub splits: [Vec<usize>; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl<T: Scalar> DigitPool<T> {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits[0],
            Split::Val => &self.splits[1],
            Split::Test => &self.splits[2],
        }
    }

    /// Indices of a split restricted to the given classes.
    pub fn class_indices(&self, split: Split, classes: &[u8]) -> Vec<usize> {
        self.indices(split)
            .iter()
            .copied()
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    /// The bundled procedural pool: 50 instances per class, 30/10/10 split.
    pub fn fallback() -> Self {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut splits: [Vec<usize>; 3] = Default::default();
        for class in 0u8..10 {
            for inst in 0..FALLBACK_PER_CLASS {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    FALLBACK_SEED ^ ((class as u64) << 32) ^ inst as u64,
                );
                images.push(render_digit(class, &mut rng));
                labels.push(class);
                let idx = images.len() - 1;
                let bucket = if inst < 30 { 0 } else if inst < 40 { 1 } else { 2 };
                splits[bucket].push(idx);
            }
        }
        Self { images, labels, splits }
    }

    /// Loads the standard IDX image/label pair; splits 80/10/10 by position,
    /// matching the source ordering.
    pub fn from_idx(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let raw = read_idx_images(images_path)?;
        let labels = read_idx_labels(labels_path)?;
        if raw.len() != labels.len() {
            return Err(Error::Parse(format!(
                "IDX pair mismatch: {} images vs {} labels",
                raw.len(),
                labels.len()
            )));
        }
        let n = raw.len();
        let mut splits: [Vec<usize>; 3] = Default::default();
        for i in 0..n {
            let bucket = if i < n * 8 / 10 { 0 } else if i < n * 9 / 10 { 1 } else { 2 };
            splits[bucket].push(i);
        }
        Ok(Self { images: raw, labels, splits })
    }
}

/// 2x2 average pooling of a 28x28 digit down to 14x14, then contrast
/// renormalization back to a [0,1] peak.
pub fn downscale_digit<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    if img.shape() != [DIGIT_SIDE, DIGIT_SIDE] {
        return Err(Error::BadShape {
            op: "downscale_digit",
            expected: "28x28".into(),
            got: img.shape().to_vec(),
        });
    }
    let quarter = T::from_f(0.25);
    let mut out = Tensor::zeros(&[SMALL_SIDE, SMALL_SIDE]);
    let mut max = T::zero();
    for r in 0..SMALL_SIDE {
        for c in 0..SMALL_SIDE {
            let mut acc = T::zero();
            for dr in 0..2 {
                for dc in 0..2 {
                    acc = acc + img.data()[(2 * r + dr) * DIGIT_SIDE + 2 * c + dc];
                }
            }
            let v = acc * quarter;
            out.data_mut()[r * SMALL_SIDE + c] = v;
            max = max.max(v);
        }
    }
    if max > T::zero() {
        let inv = T::one() / max;
        for v in out.data_mut() {
            *v = *v * inv;
        }
    }
    Ok(out)
}

// ── IDX format ──────────────────────────────────────────────────────────────

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

pub fn read_idx_images<T: Scalar>(path: &Path) -> Result<Vec<Tensor<T>>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_u32_be(&mut f)?;
    if magic != 0x0000_0803 {
        return Err(Error::Parse(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = read_u32_be(&mut f)? as usize;
    let rows = read_u32_be(&mut f)? as usize;
    let cols = read_u32_be(&mut f)? as usize;
    let mut buf = vec![0u8; rows * cols];
    let scale = T::from_f(1.0 / 255.0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        f.read_exact(&mut buf)?;
        out.push(Tensor::from_fn(&[rows, cols], |i| T::from_f(buf[i] as f64) * scale));
    }
    Ok(out)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_u32_be(&mut f)?;
    if magic != 0x0000_0801 {
        return Err(Error::Parse(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = read_u32_be(&mut f)? as usize;
    let mut buf = vec![0u8; n];
    f.read_exact(&mut buf)?;
    Ok(buf)
}

/// Writes a (images, labels) IDX pair; used by tests and the dataset tools.
pub fn write_idx_pair<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    images: &[Tensor<T>],
    labels: &[u8],
) -> Result<()> {
    use std::io::Write;
    assert_eq!(images.len(), labels.len());
    let (rows, cols) = (images[0].shape()[0], images[0].shape()[1]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(images_path)?);
    f.write_all(&0x0000_0803u32.to_be_bytes())?;
    f.write_all(&(images.len() as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    for img in images {
        for &v in img.data() {
            f.write_all(&[(v.to_f() * 255.0).round().clamp(0.0, 255.0) as u8])?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(labels_path)?);
    f.write_all(&0x0000_0801u32.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

// ── procedural renderer ─────────────────────────────────────────────────────

type Stroke = Vec<(f64, f64)>;

fn circle(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let n = 28;
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn line(a: (f64, f64), b: (f64, f64)) -> Stroke {
    vec![a, b]
}

/// Stroke templates in unit coordinates, y growing downward.
fn template(class: u8) -> Vec<Stroke> {
    use std::f64::consts::PI;
    match class {
        0 => vec![circle(0.5, 0.5, 0.26, 0.36, 0.0, 2.0 * PI)],
        1 => vec![line((0.38, 0.26), (0.54, 0.12)), line((0.54, 0.12), (0.54, 0.88))],
        2 => vec![
            circle(0.5, 0.3, 0.22, 0.18, -PI, 0.0),
            line((0.72, 0.3), (0.28, 0.85)),
            line((0.28, 0.85), (0.75, 0.85)),
        ],
        3 => vec![
            circle(0.47, 0.3, 0.2, 0.17, -0.8 * PI, 0.45 * PI),
            circle(0.47, 0.66, 0.23, 0.2, -0.45 * PI, 0.85 * PI),
        ],
        4 => vec![
            line((0.62, 0.12), (0.24, 0.62)),
            line((0.24, 0.62), (0.8, 0.62)),
            line((0.62, 0.12), (0.62, 0.88)),
        ],
        5 => vec![
            line((0.72, 0.12), (0.32, 0.12)),
            line((0.32, 0.12), (0.3, 0.45)),
            circle(0.48, 0.64, 0.23, 0.21, -0.55 * PI, 0.8 * PI),
        ],
        6 => vec![
            line((0.62, 0.12), (0.38, 0.5)),
            circle(0.5, 0.65, 0.19, 0.2, 0.0, 2.0 * PI),
        ],
        7 => vec![line((0.25, 0.14), (0.75, 0.14)), line((0.75, 0.14), (0.42, 0.88))],
        8 => vec![
            circle(0.5, 0.31, 0.18, 0.17, 0.0, 2.0 * PI),
            circle(0.5, 0.67, 0.21, 0.2, 0.0, 2.0 * PI),
        ],
        9 => vec![
            circle(0.52, 0.33, 0.19, 0.18, 0.0, 2.0 * PI),
            line((0.71, 0.33), (0.6, 0.86)),
        ],
        _ => panic!("digit class out of range"),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// One randomized 28x28 rendering of a digit class: the stroke template under
/// a random affine jitter, rasterized with a soft-edged pen.
pub fn render_digit<T: Scalar>(class: u8, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let strokes = template(class);
    let rot = rng.random_range(-0.18..0.18f64);
    let shear = rng.random_range(-0.18..0.18f64);
    let sx = rng.random_range(0.8..1.02f64);
    let sy = rng.random_range(0.8..1.02f64);
    let tx = rng.random_range(-1.6..1.6f64);
    let ty = rng.random_range(-1.4..1.4f64);
    let thickness = rng.random_range(1.0..1.7f64);
    let side = DIGIT_SIDE as f64;
    let map = |(x, y): (f64, f64)| -> (f64, f64) {
        // center, jitter, move to pixel space with a 3px margin
        let (cx, cy) = (x - 0.5, y - 0.5);
        let (jx, jy) = (cx + shear * cy, cy);
        let (rx, ry) = (
            jx * rot.cos() - jy * rot.sin(),
            jx * rot.sin() + jy * rot.cos(),
        );
        (
            (rx * sx + 0.5) * (side - 6.0) + 3.0 + tx,
            (ry * sy + 0.5) * (side - 6.0) + 3.0 + ty,
        )
    };
    let segs: Vec<((f64, f64), (f64, f64))> = strokes
        .iter()
        .flat_map(|s| s.windows(2).map(|w| (map(w[0]), map(w[1]))).collect::<Vec<_>>())
        .collect();
    Tensor::from_fn(&[DIGIT_SIDE, DIGIT_SIDE], |i| {
        let p = ((i % DIGIT_SIDE) as f64 + 0.5, (i / DIGIT_SIDE) as f64 + 0.5);
        let d = segs
            .iter()
            .map(|&(a, b)| dist_to_segment(p, a, b))
            .fold(f64::INFINITY, f64::min);
        let v = ((thickness + 0.6 - d) / 0.9).clamp(0.0, 1.0);
        T::from_f(v)
    })
}
