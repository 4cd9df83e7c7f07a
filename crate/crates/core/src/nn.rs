//! Parameter storage, initialization, and normalization bookkeeping shared by
//! cells and full models.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, BnMode, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Named parameter tensors, ordered by name. Checkpoints serialize each entry
/// under `<layer>/<cell>/<param>`.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(self.map.insert(name.clone(), t).is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Number of parameter elements under a name prefix.
    pub fn num_elements_under(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Inserts every parameter into a graph as a tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.map {
            vars.insert(name.clone(), g.param(t));
        }
        Bound { vars }
    }

    /// Writes one tensor file per parameter under `dir`, slashes in names
    /// becoming subdirectories.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for (name, t) in &self.map {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut w = BufWriter::new(std::fs::File::create(&path)?);
            write_tensor(&mut w, t)?;
        }
        Ok(())
    }

    /// Reloads every parameter listed in `self` from `dir` (shapes must
    /// match the declared ones).
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for (name, t) in self.map.iter_mut() {
            let path = dir.join(name);
            let mut r = BufReader::new(std::fs::File::open(&path)?);
            let loaded: Tensor<T> = read_tensor(&mut r)?;
            if loaded.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    lhs: t.shape().to_vec(),
                    rhs: loaded.shape().to_vec(),
                });
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// Graph-bound parameter handles for one forward/backward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn try_var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArg { op: "bind", msg: format!("missing parameter {name}") })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ── initializers ───────────────────────────────────────────────────────────

pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-uniform: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f(rng.random_range(-bound..bound)))
}

/// Orthogonal rows via Gram-Schmidt on a Gaussian matrix; falls back to
/// scaled Gaussian rows when rows > cols.
pub fn orthogonal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| normal_sample(rng)).collect())
        .collect();
    for r in 0..rows.min(cols) {
        for prev in 0..r {
            let dot: f64 = (0..cols).map(|c| m[r][c] * m[prev][c]).sum();
            for c in 0..cols {
                m[r][c] -= dot * m[prev][c];
            }
        }
        let norm: f64 = (0..cols).map(|c| m[r][c] * m[r][c]).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for c in 0..cols {
                m[r][c] /= norm;
            }
        }
    }
    if rows > cols {
        let scale = 1.0 / (cols as f64).sqrt();
        for row in m.iter_mut().skip(cols) {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    Tensor::from_fn(&[rows, cols], |i| T::from_f(m[i / cols][i % cols]))
}

// ── normalization session ──────────────────────────────────────────────────

/// Running batch-norm statistics keyed by the norm instance name.
#[derive(Clone, Debug, Default)]
pub struct RunningStats<T> {
    pub entries: BTreeMap<String, (Vec<T>, Vec<T>)>, // mean, var
}

impl<T: Scalar> RunningStats<T> {
    pub fn fold(&mut self, key: &str, mean: &[T], var: &[T], momentum: T) {
        let one = T::one();
        match self.entries.get_mut(key) {
            Some((rm, rv)) => {
                for (r, &b) in rm.iter_mut().zip(mean) {
                    *r = momentum * *r + (one - momentum) * b;
                }
                for (r, &b) in rv.iter_mut().zip(var) {
                    *r = momentum * *r + (one - momentum) * b;
                }
            }
            None => {
                self.entries.insert(key.to_string(), (mean.to_vec(), var.to_vec()));
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<(&[T], &[T])> {
        self.entries.get(key).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-pass normalization context: dispatches batch norms to batch or running
/// statistics and records updates.
pub struct NormSession<'a, T: Scalar> {
    pub phase: Phase,
    pub stats: &'a mut RunningStats<T>,
    pub momentum: T,
}

impl<'a, T: Scalar> NormSession<'a, T> {
    pub fn new(phase: Phase, stats: &'a mut RunningStats<T>, momentum: f64) -> Self {
        Self { phase, stats, momentum: T::from_f(momentum) }
    }

    pub fn batch_norm(&mut self, g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, key: &str) -> Result<Var> {
        let mode = match self.phase {
            Phase::Train => BnMode::Train,
            Phase::Eval => {
                let c = g.value(gamma).len();
                match self.stats.get(key) {
                    Some((m, v)) => BnMode::Eval { mean: m.to_vec(), var: v.to_vec() },
                    None => BnMode::Eval { mean: vec![T::zero(); c], var: vec![T::one(); c] },
                }
            }
        };
        let (y, batch_stats) = g.batch_norm(x, gamma, beta, mode)?;
        if let Some((m, v)) = batch_stats {
            self.stats.fold(key, &m, &v, self.momentum);
        }
        Ok(y)
    }
}

pub const BN_MOMENTUM: f64 = 0.99;
