//! Variational message passing in hierarchical Gaussian chain models, with
//! a directly solved precision-matrix oracle. The static three-level chain
//! (x under observation noise, y above it, z on top) admits closed-form
//! coordinate-ascent updates whose fixed-point means are exact.

pub mod temporal;

use crate::scalar::{sigmoid, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Weights and variances of the static chain
/// p(x|y) = N(w_x y, var_x), p(y|z) = N(w_yz z, var_y), p(z) = N(mu_z, var_z),
/// observed through p(x_tilde|x) = N(x, var_obs).
#[derive(Clone, Copy, Debug)]
pub struct StaticChainModel<T> {
    pub w_x: T,
    pub var_x: T,
    pub w_yz: T,
    pub var_y: T,
    pub mu_z: T,
    pub var_z: T,
    pub var_obs: T,
}

impl<T: Scalar> StaticChainModel<T> {
    pub fn is_valid(&self) -> bool {
        self.var_x > T::zero() && self.var_y > T::zero() && self.var_z > T::zero() && self.var_obs > T::zero()
    }

    /// Random model with moderate variance ratios; weights bounded away from
    /// zero so gated and precision forms coincide. Models whose coordinate
    /// ascent contracts slower than 0.8 per sweep are redrawn, which keeps
    /// the 200-sweep budget sufficient for 1e-8 agreement with the oracle.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let var = |r: &mut ChaCha8Rng| T::from_f(r.random_range(-1.5..1.5f64).exp());
        let w = |r: &mut ChaCha8Rng| {
            let mag = r.random_range(0.3..1.8);
            T::from_f(if r.random_bool(0.5) { mag } else { -mag })
        };
        loop {
            let m = Self {
                w_x: w(rng),
                var_x: var(rng),
                w_yz: w(rng),
                var_y: var(rng),
                mu_z: T::from_f(rng.random_range(-2.0..2.0)),
                var_z: var(rng),
                var_obs: var(rng),
            };
            let g = static_gates(&m);
            let one = T::one();
            let contraction = (one - g.s_x) * g.s_y + (one - g.s_y) * g.s_z;
            if contraction <= T::from_f(0.8) {
                return m;
            }
        }
    }
}

/// Per-level posterior factors q(x), q(y), q(z).
#[derive(Clone, Copy, Debug, Default)]
pub struct StaticPosterior<T> {
    pub m_x: T,
    pub v_x: T,
    pub m_y: T,
    pub v_y: T,
    pub m_z: T,
    pub v_z: T,
}

/// Convex-combination gates and fixed-point variances of the static updates.
#[derive(Clone, Copy, Debug)]
pub struct StaticGates<T> {
    pub s_x: T,
    pub s_y: T,
    pub s_z: T,
    pub v_x: T,
    pub v_y: T,
    pub v_z: T,
}

/// s_x = sigmoid(log(var_x / var_obs)), s_y = sigmoid(log(var_y w_x^2 / var_x)),
/// s_z = sigmoid(log(var_z w_yz^2 / var_y)); v are the precision sums.
pub fn static_gates<T: Scalar>(m: &StaticChainModel<T>) -> StaticGates<T> {
    debug_assert!(m.is_valid());
    let one = T::one();
    StaticGates {
        s_x: sigmoid((m.var_x / m.var_obs).ln()),
        s_y: sigmoid((m.var_y * m.w_x * m.w_x / m.var_x).ln()),
        s_z: sigmoid((m.var_z * m.w_yz * m.w_yz / m.var_y).ln()),
        v_x: one / (one / m.var_obs + one / m.var_x),
        v_y: one / (m.w_x * m.w_x / m.var_x + one / m.var_y),
        v_z: one / (m.w_yz * m.w_yz / m.var_y + one / m.var_z),
    }
}

/// s * (num / den), defined as 0 when the gate is exactly 0 (zero weight).
fn gated<T: Scalar>(s: T, num: T, den: T) -> T {
    if s == T::zero() {
        T::zero()
    } else {
        s * (num / den)
    }
}

/// One coordinate-ascent sweep in the bottom-up order x, y, z; each update is
/// the gated convex combination of the message from below and from above.
pub fn static_sweep<T: Scalar>(m: &StaticChainModel<T>, x_tilde: T, p: &StaticPosterior<T>) -> StaticPosterior<T> {
    let g = static_gates(m);
    let one = T::one();
    let m_x = g.s_x * x_tilde + (one - g.s_x) * m.w_x * p.m_y;
    let m_y = gated(g.s_y, m_x, m.w_x) + (one - g.s_y) * m.w_yz * p.m_z;
    let m_z = gated(g.s_z, m_y, m.w_yz) + (one - g.s_z) * m.mu_z;
    StaticPosterior { m_x, v_x: g.v_x, m_y, v_y: g.v_y, m_z, v_z: g.v_z }
}

/// One row of a sweep trace: (sweep index, C_VB, means).
pub type SweepTraceRow<T> = (usize, T, T, T, T);

/// Iterates sweeps from `init` until max |delta m| < tol or `max_sweeps`.
/// Returns the posterior, the number of sweeps run, and a per-sweep trace.
pub fn solve_mean_field<T: Scalar>(
    m: &StaticChainModel<T>,
    x_tilde: T,
    init: StaticPosterior<T>,
    max_sweeps: usize,
    tol: T,
) -> (StaticPosterior<T>, usize, Vec<SweepTraceRow<T>>) {
    let mut p = init;
    let mut trace = Vec::new();
    for sweep in 1..=max_sweeps {
        let next = static_sweep(m, x_tilde, &p);
        let delta = (next.m_x - p.m_x)
            .abs()
            .max((next.m_y - p.m_y).abs())
            .max((next.m_z - p.m_z).abs());
        p = next;
        trace.push((sweep, vb_cost(m, x_tilde, &p), p.m_x, p.m_y, p.m_z));
        if delta < tol {
            return (p, sweep, trace);
        }
    }
    (p, max_sweeps, trace)
}

pub const MF_MAX_SWEEPS: usize = 200;
pub const MF_TOL: f64 = 1e-12;

/// Exact joint posterior of (x, y, z) given the observation.
#[derive(Clone, Copy, Debug)]
pub struct ExactStatic<T> {
    pub mean: [T; 3],
    pub cov: [[T; 3]; 3],
}

/// Builds the 3x3 precision matrix of p(x,y,z | x_tilde) and solves directly.
pub fn static_exact<T: Scalar>(m: &StaticChainModel<T>, x_tilde: T) -> ExactStatic<T> {
    debug_assert!(m.is_valid());
    let one = T::one();
    let zero = T::zero();
    let lam = [
        [one / m.var_obs + one / m.var_x, -m.w_x / m.var_x, zero],
        [
            -m.w_x / m.var_x,
            m.w_x * m.w_x / m.var_x + one / m.var_y,
            -m.w_yz / m.var_y,
        ],
        [zero, -m.w_yz / m.var_y, m.w_yz * m.w_yz / m.var_y + one / m.var_z],
    ];
    let eta = [x_tilde / m.var_obs, zero, m.mu_z / m.var_z];
    let cov = invert3(&lam);
    let mut mean = [zero; 3];
    for i in 0..3 {
        for j in 0..3 {
            mean[i] = mean[i] + cov[i][j] * eta[j];
        }
    }
    ExactStatic { mean, cov }
}

fn invert3<T: Scalar>(a: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    assert!(det != T::zero(), "singular precision matrix");
    let inv_det = T::one() / det;
    let mut c = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
            let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
            // cofactor transpose (adjugate): note swapped i/j
            c[j][i] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) * inv_det;
        }
    }
    c
}

/// C_VB = E_q[log q] - E_q[log p(x, y, z, x_tilde)], all expectations of the
/// Gaussian factorized posterior in closed form.
pub fn vb_cost<T: Scalar>(m: &StaticChainModel<T>, x_tilde: T, p: &StaticPosterior<T>) -> T {
    let two_pi = T::from_f(std::f64::consts::TAU);
    let half = T::from_f(0.5);
    let e_log_q = |v: T| -half * (two_pi * v).ln() - half;
    let entropy_part = e_log_q(p.v_x) + e_log_q(p.v_y) + e_log_q(p.v_z);

    let gauss = |resid_sq: T, var: T| -half * (two_pi * var).ln() - resid_sq / (var + var);
    let d_obs = x_tilde - p.m_x;
    let e_obs = gauss(d_obs * d_obs + p.v_x, m.var_obs);
    let d_x = p.m_x - m.w_x * p.m_y;
    let e_x = gauss(d_x * d_x + p.v_x + m.w_x * m.w_x * p.v_y, m.var_x);
    let d_y = p.m_y - m.w_yz * p.m_z;
    let e_y = gauss(d_y * d_y + p.v_y + m.w_yz * m.w_yz * p.v_z, m.var_y);
    let d_z = p.m_z - m.mu_z;
    let e_z = gauss(d_z * d_z + p.v_z, m.var_z);

    entropy_part - (e_obs + e_x + e_y + e_z)
}

/// Squared error summed over components.
pub fn prediction_loss<T: Scalar>(predicted: &[T], actual: &[T]) -> T {
    assert_eq!(predicted.len(), actual.len(), "prediction_loss shape");
    predicted
        .iter()
        .zip(actual)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// Bernoulli negative log-likelihood summed over components; the binary-pixel
/// variant of the prediction cost.
pub fn prediction_loss_bernoulli<T: Scalar>(predicted: &[T], actual: &[T]) -> T {
    assert_eq!(predicted.len(), actual.len(), "prediction_loss shape");
    let eps = T::from_f(1e-12);
    let one = T::one();
    predicted
        .iter()
        .zip(actual)
        .map(|(&p, &x)| {
            let pc = p.max(eps).min(one - eps);
            -(x * pc.ln() + (one - x) * (one - pc).ln())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn unit_model() -> StaticChainModel<f64> {
        StaticChainModel {
            w_x: 1.0,
            var_x: 1.0,
            w_yz: 1.0,
            var_y: 1.0,
            mu_z: 0.0,
            var_z: 1.0,
            var_obs: 1.0,
        }
    }

    #[test]
    fn gates_are_half_for_matched_variances() {
        let g = static_gates(&unit_model());
        assert_eq!(g.s_x, 0.5);
        assert_eq!(g.s_y, 0.5);
        assert!((g.v_x - 0.5).abs() < 1e-15);
    }

    #[test]
    fn precision_sum_restates_v_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = StaticChainModel::<f64>::sample(&mut rng);
            let g = static_gates(&m);
            assert!((1.0 / g.v_x - (1.0 / m.var_obs + 1.0 / m.var_x)).abs() < 1e-12);
        }
    }

    #[test]
    fn near_noiseless_observation_pins_m_x() {
        let mut m = unit_model();
        m.var_obs = 1e-12;
        let p = static_sweep(&m, 3.25, &StaticPosterior::default());
        assert!((p.m_x - 3.25).abs() < 1e-6);
    }

    #[test]
    fn hand_traced_first_sweep() {
        // all-unit model, x_tilde = 1, zero init: m_x = s_x = 0.5,
        // m_y = s_y * m_x = 0.25, m_z = s_z * m_y = 0.125
        let p = static_sweep(&unit_model(), 1.0, &StaticPosterior::default());
        assert!((p.m_x - 0.5).abs() < 1e-15);
        assert!((p.m_y - 0.25).abs() < 1e-15);
        assert!((p.m_z - 0.125).abs() < 1e-15);
    }

    #[test]
    fn uninformative_observation_leaves_prior_mean_on_z() {
        let mut m = unit_model();
        m.mu_z = 1.7;
        m.var_obs = 1e12;
        let e = static_exact(&m, 123.0);
        assert!((e.mean[2] - m.mu_z).abs() < 1e-9, "{}", e.mean[2]);
    }

    #[test]
    fn zero_weights_decouple_levels() {
        // w_x = w_yz = 0: each level is an independent product of two
        // Gaussians with known closed form
        let m = StaticChainModel::<f64> {
            w_x: 0.0,
            var_x: 2.0,
            w_yz: 0.0,
            var_y: 3.0,
            mu_z: 0.4,
            var_z: 5.0,
            var_obs: 1.0,
        };
        let x_tilde = 2.0f64;
        let e = static_exact(&m, x_tilde);
        // x: product of N(x_tilde, var_obs) and N(0, var_x)
        let expect_x = x_tilde * m.var_x / (m.var_obs + m.var_x);
        assert!((e.mean[0] - expect_x).abs() < 1e-12);
        assert!((e.mean[1] - 0.0).abs() < 1e-12);
        assert!((e.mean[2] - m.mu_z).abs() < 1e-12);
        // sweeps agree (gates collapse to zero where weights vanish)
        let (p, _, _) = solve_mean_field(&m, x_tilde, StaticPosterior::default(), 200, 1e-12);
        assert!((p.m_x - expect_x).abs() < 1e-10);
        assert!((p.m_z - m.mu_z).abs() < 1e-10);
    }

    #[test]
    fn covariance_is_symmetric_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let m = StaticChainModel::<f64>::sample(&mut rng);
            let e = static_exact(&m, 0.7);
            for i in 0..3 {
                assert!(e.cov[i][i] > 0.0);
                for j in 0..3 {
                    assert!((e.cov[i][j] - e.cov[j][i]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn prediction_losses_match_direct_sums() {
        assert_eq!(prediction_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let n = 7;
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!((prediction_loss(&b, &a) - n as f64).abs() < 1e-12);
        let p: [f64; 2] = [0.3, 0.8];
        let x: [f64; 2] = [1.0, 0.0];
        let direct = -(x[0] * p[0].ln() + (1.0 - x[0]) * (1.0 - p[0]).ln())
            - (x[1] * p[1].ln() + (1.0 - x[1]) * (1.0 - p[1]).ln());
        assert!((prediction_loss_bernoulli(&p, &x) - direct).abs() < 1e-12);
    }
}
