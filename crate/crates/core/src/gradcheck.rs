//! Central finite-difference gradient verification.
//!
//! Checks run in f64 only; the step 1e-4 and the <1e-4 relative tolerance are
//! meaningless in f32. Each registered op/cell is exercised on randomized
//! instances and reports its worst relative error.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a unit floor so that near-zero gradients compare
/// absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Verifies analytic gradients of `build` (graph in, scalar loss out) against
/// central differences for every element of every input. Returns the worst
/// relative error.
pub fn check_gradient(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[ti][ei], numeric));
        }
    }
    Ok(worst)
}

pub fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f(rng.random_range(lo..hi)))
}

/// Random values bounded away from zero; keeps relu/abs kinks and pool ties
/// out of the finite-difference window.
pub fn rand_tensor_offzero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], mag: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.2..mag);
        if rng.random_bool(0.5) {
            T::from_f(v)
        } else {
            T::from_f(-v)
        }
    })
}

/// One registered check: builds a random instance from a seed and returns its
/// worst relative error.
pub struct OpCheck {
    pub name: &'static str,
    pub run: Box<dyn Fn(u64) -> Result<f64> + Sync>,
}

/// Runs every check on `instances` seeded instances; returns per-op worst
/// errors, sorted as registered.
pub fn run_suite(checks: &[OpCheck], instances: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(checks.len());
    for c in checks {
        let mut worst = 0.0f64;
        for i in 0..instances {
            worst = worst.max((c.run)(seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))?);
        }
        out.push((c.name.to_string(), worst));
    }
    Ok(out)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
