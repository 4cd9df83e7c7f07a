//! Online inference in the temporal hierarchical chain: per step, top-down
//! predictions m', a bottom-up corrected pass m~, and top-down corrected
//! means m, with past-step posteriors held fixed (filtering regime).
//!
//! The bottom-up pass propagates the observation evidence in precision form,
//! marginalizing each traversed level; this makes one up-down sweep land
//! exactly on the per-step coordinate-ascent fixed point. At the first latent
//! level the gate reduces to sigmoid(log(var_1 w_01^2 / var_0)), the familiar
//! log-variance-ratio form.

use crate::scalar::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Chain with observation level 0 and latent levels 1..=L:
/// p(h_l,t | h_l,t-1, h_l+1,t) = N(self_weights[l] h_l,t-1
///   + cross_weights[l] h_l+1,t, noise_vars[l]), top level without the cross
/// term.
#[derive(Clone, Debug)]
pub struct TemporalChainModel<T> {
    pub self_weights: Vec<T>,  // len L+1, index 0 = observation level
    pub cross_weights: Vec<T>, // len L, [l] couples level l to level l+1
    pub noise_vars: Vec<T>,    // len L+1
}

impl<T: Scalar> TemporalChainModel<T> {
    pub fn levels(&self) -> usize {
        self.noise_vars.len() - 1
    }

    pub fn is_valid(&self) -> bool {
        self.noise_vars.iter().all(|&v| v > T::zero())
            && self.self_weights.len() == self.noise_vars.len()
            && self.cross_weights.len() + 1 == self.noise_vars.len()
    }

    pub fn sample(rng: &mut ChaCha8Rng, levels: usize) -> Self {
        let w = |r: &mut ChaCha8Rng| {
            let mag = r.random_range(0.3..1.5);
            T::from_f(if r.random_bool(0.5) { mag } else { -mag })
        };
        Self {
            self_weights: (0..=levels).map(|_| w(rng)).collect(),
            cross_weights: (0..levels).map(|_| w(rng)).collect(),
            noise_vars: (0..=levels).map(|_| T::from_f(rng.random_range(-1.5..1.5f64).exp())).collect(),
        }
    }
}

/// Per-step posterior record over the latent levels (index 0 = level 1).
#[derive(Clone, Debug)]
pub struct TemporalPosterior<T> {
    /// m'_l: predictive means before observing x_t.
    pub prior_means: Vec<T>,
    /// m~_l: means after the bottom-up corrected pass.
    pub encoder_means: Vec<T>,
    /// m_l: means after the top-down corrections.
    pub means: Vec<T>,
    /// v_l = (w_{l-1,l}^2 / var_{l-1} + 1 / var_l)^{-1}, the mean-field
    /// fixed-point variances.
    pub vars: Vec<T>,
    /// Bottom-up gates actually applied, in (0, 1).
    pub gates: Vec<T>,
}

impl<T: Scalar> TemporalPosterior<T> {
    pub fn initial(levels: usize) -> Self {
        Self {
            prior_means: vec![T::zero(); levels],
            encoder_means: vec![T::zero(); levels],
            means: vec![T::zero(); levels],
            vars: vec![T::one(); levels],
            gates: vec![T::from_f(0.5); levels],
        }
    }
}

/// One filtering step: consumes the fixed posterior means of step t-1, the
/// previous observation and the new observation.
pub fn temporal_step<T: Scalar>(
    model: &TemporalChainModel<T>,
    prev_means: &[T],
    x_prev: T,
    x_t: T,
) -> TemporalPosterior<T> {
    let levels = model.levels();
    assert_eq!(prev_means.len(), levels, "previous posterior level count");
    let sw = &model.self_weights;
    let cw = &model.cross_weights;
    let nv = &model.noise_vars;
    let one = T::one();
    let zero = T::zero();

    // top-down predictive pass
    let mut prior = vec![zero; levels];
    prior[levels - 1] = sw[levels] * prev_means[levels - 1];
    for l in (1..levels).rev() {
        // level index l corresponds to latent level l (prior[l-1])
        prior[l - 1] = sw[l] * prev_means[l - 1] + cw[l] * prior[l];
    }

    // bottom-up evidence in precision form (lambda, eta = lambda * mean)
    let mut lambda = vec![zero; levels];
    let mut eta = vec![zero; levels];
    lambda[0] = cw[0] * cw[0] / nv[0];
    eta[0] = cw[0] * (x_t - sw[0] * x_prev) / nv[0];
    for l in 2..=levels {
        let (lam_lo, eta_lo) = (lambda[l - 2], eta[l - 2]);
        if lam_lo == zero || cw[l - 1] == zero {
            lambda[l - 1] = zero;
            eta[l - 1] = zero;
            continue;
        }
        // marginalize level l-1: evidence variance grows by its noise
        let msg_var = (one / lam_lo + nv[l - 1]) / (cw[l - 1] * cw[l - 1]);
        let msg_mean = (eta_lo / lam_lo - sw[l - 1] * prev_means[l - 2]) / cw[l - 1];
        lambda[l - 1] = one / msg_var;
        eta[l - 1] = msg_mean / msg_var;
    }

    let mut gates = vec![zero; levels];
    let mut enc = vec![zero; levels];
    let mut vars = vec![zero; levels];
    for l in 1..=levels {
        let own_prec = one / nv[l];
        gates[l - 1] = lambda[l - 1] / (lambda[l - 1] + own_prec);
        enc[l - 1] = (eta[l - 1] + prior[l - 1] * own_prec) / (lambda[l - 1] + own_prec);
        let below_prec = cw[l - 1] * cw[l - 1] / nv[l - 1];
        vars[l - 1] = one / (below_prec + own_prec);
    }

    // top-down corrections
    let mut means = vec![zero; levels];
    means[levels - 1] = enc[levels - 1];
    for l in (1..levels).rev() {
        means[l - 1] = enc[l - 1] + (one - gates[l - 1]) * cw[l] * (means[l] - prior[l]);
    }

    TemporalPosterior { prior_means: prior, encoder_means: enc, means, vars, gates }
}

/// Predictive mean of the next observation given the step-t posterior.
pub fn predict_next<T: Scalar>(model: &TemporalChainModel<T>, posterior: &TemporalPosterior<T>, x_t: T) -> T {
    let levels = model.levels();
    let sw = &model.self_weights;
    let cw = &model.cross_weights;
    let mut up = sw[levels] * posterior.means[levels - 1];
    for l in (1..levels).rev() {
        up = sw[l] * posterior.means[l - 1] + cw[l] * up;
    }
    sw[0] * x_t + cw[0] * up
}

/// L = 2 closed form obtained by equating the C_VB derivatives to zero and
/// solving the resulting 2x2 linear system by substitution. Returns
/// (m_y, v_y, m_z, v_z).
pub fn temporal_step_equated_l2<T: Scalar>(
    model: &TemporalChainModel<T>,
    prev_means: &[T],
    x_prev: T,
    x_t: T,
) -> (T, T, T, T) {
    assert_eq!(model.levels(), 2);
    let one = T::one();
    let (sw, cw, nv) = (&model.self_weights, &model.cross_weights, &model.noise_vars);
    let (prev_y, prev_z) = (prev_means[0], prev_means[1]);
    let a = cw[0] * cw[0] / nv[0];
    let b = one / nv[1];
    let c = cw[1] * cw[1] / nv[1];
    let d = one / nv[2];
    let v_y = one / (a + b);
    let v_z = one / (c + d);
    // m_y = P + Q m_z; substitute into the z stationarity condition
    let p = v_y * (cw[0] * (x_t - sw[0] * x_prev) / nv[0] + sw[1] * prev_y / nv[1]);
    let q = v_y * cw[1] / nv[1];
    let rhs = v_z * (cw[1] * (p - sw[1] * prev_y) / nv[1] + sw[2] * prev_z / nv[2]);
    let m_z = rhs / (one - v_z * cw[1] * q / nv[1]);
    let m_y = p + q * m_z;
    (m_y, v_y, m_z, v_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn zero_cross_weights_give_pure_autoregression() {
        let model = TemporalChainModel::<f64> {
            self_weights: vec![0.9, 0.8, 0.7],
            cross_weights: vec![0.0, 0.0],
            noise_vars: vec![1.0, 2.0, 3.0],
        };
        let prev = [1.5, -0.5];
        let post = temporal_step(&model, &prev, 0.3, 0.9);
        assert!((post.means[0] - 0.8 * 1.5).abs() < 1e-14);
        assert!((post.means[1] - 0.7 * -0.5).abs() < 1e-14);
    }

    #[test]
    fn equated_derivative_form_matches_message_passing_to_1e12() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let model = TemporalChainModel::<f64>::sample(&mut rng, 2);
            let prev = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (x_prev, x_t) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let post = temporal_step(&model, &prev, x_prev, x_t);
            let (m_y, v_y, m_z, v_z) = temporal_step_equated_l2(&model, &prev, x_prev, x_t);
            assert!((post.means[0] - m_y).abs() < 1e-12, "{} vs {m_y}", post.means[0]);
            assert!((post.means[1] - m_z).abs() < 1e-12);
            assert!((post.vars[0] - v_y).abs() < 1e-12);
            assert!((post.vars[1] - v_z).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_stay_in_unit_interval_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..100 {
            let model = TemporalChainModel::<f64>::sample(&mut rng, 3);
            let prev = [0.3, -0.2, 0.1];
            let post = temporal_step(&model, &prev, 0.0, 1.0);
            for &s in &post.gates {
                assert!(s > 0.0 && s < 1.0);
            }
            // scaling every variance by the same factor keeps gates unchanged
            let mut scaled = model.clone();
            for v in scaled.noise_vars.iter_mut() {
                *v *= 7.3;
            }
            let post2 = temporal_step(&scaled, &prev, 0.0, 1.0);
            for (a, b) in post.gates.iter().zip(&post2.gates) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_latent_gate_is_the_log_variance_ratio_sigmoid() {
        use crate::scalar::sigmoid;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let model = TemporalChainModel::<f64>::sample(&mut rng, 2);
            let post = temporal_step(&model, &[0.1, 0.2], 0.5, -0.3);
            let expect = sigmoid((model.noise_vars[1] * model.cross_weights[0].powi(2) / model.noise_vars[0]).ln());
            assert!((post.gates[0] - expect).abs() < 1e-12);
        }
    }
}
