//! Independent oracles for the Gaussian message-passing code:
//! a dense-grid quadrature for the static posterior, generic coordinate
//! ascent for the temporal per-step fixed point, and VB-cost probes.

use rladder_core::gaussian::temporal::{
    temporal_step, temporal_step_equated_l2, TemporalChainModel,
};
use rladder_core::gaussian::{
    solve_mean_field, static_exact, static_sweep, vb_cost, StaticChainModel, StaticPosterior,
};
use rladder_core::scalar::sigmoid;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ── static model ───────────────────────────────────────────────────────────

#[test]
fn mean_field_fixed_point_matches_precision_matrix_oracle() {
    let mut r = rng(100);
    for _ in 0..100 {
        let m = StaticChainModel::<f64>::sample(&mut r);
        let x_tilde = r.random_range(-3.0..3.0);
        let (p, sweeps, _) = solve_mean_field(&m, x_tilde, StaticPosterior::default(), 200, 1e-12);
        assert!(sweeps <= 200);
        let e = static_exact(&m, x_tilde);
        assert!((p.m_x - e.mean[0]).abs() < 1e-8, "m_x gap {}", (p.m_x - e.mean[0]).abs());
        assert!((p.m_y - e.mean[1]).abs() < 1e-8);
        assert!((p.m_z - e.mean[2]).abs() < 1e-8);
    }
}

#[test]
fn mean_field_variances_never_exceed_exact_marginals() {
    let mut r = rng(101);
    for _ in 0..100 {
        let m = StaticChainModel::<f64>::sample(&mut r);
        let (p, _, _) = solve_mean_field(&m, 0.8, StaticPosterior::default(), 200, 1e-12);
        let e = static_exact(&m, 0.8);
        assert!(p.v_x <= e.cov[0][0] + 1e-12);
        assert!(p.v_y <= e.cov[1][1] + 1e-12);
        assert!(p.v_z <= e.cov[2][2] + 1e-12);
    }
}

#[test]
fn vb_cost_is_monotone_non_increasing_across_sweeps() {
    let mut r = rng(102);
    for _ in 0..50 {
        let m = StaticChainModel::<f64>::sample(&mut r);
        let x_tilde = r.random_range(-2.0..2.0);
        let init = StaticPosterior {
            m_x: r.random_range(-3.0..3.0),
            v_x: r.random_range(0.1..2.0),
            m_y: r.random_range(-3.0..3.0),
            v_y: r.random_range(0.1..2.0),
            m_z: r.random_range(-3.0..3.0),
            v_z: r.random_range(0.1..2.0),
        };
        let mut prev_cost = vb_cost(&m, x_tilde, &init);
        let mut p = init;
        for _ in 0..40 {
            p = static_sweep(&m, x_tilde, &p);
            let c = vb_cost(&m, x_tilde, &p);
            assert!(c <= prev_cost + 1e-10, "C_VB rose: {prev_cost} -> {c}");
            prev_cost = c;
        }
    }
}

#[test]
fn vb_cost_fixed_point_beats_perturbations() {
    let mut r = rng(103);
    let m = StaticChainModel::<f64>::sample(&mut r);
    let x_tilde = 1.1;
    let (p, _, _) = solve_mean_field(&m, x_tilde, StaticPosterior::default(), 200, 1e-14);
    let c_star = vb_cost(&m, x_tilde, &p);
    for _ in 0..100 {
        let q = StaticPosterior {
            m_x: p.m_x + r.random_range(-0.5..0.5),
            v_x: p.v_x * r.random_range(0.5..2.0),
            m_y: p.m_y + r.random_range(-0.5..0.5),
            v_y: p.v_y * r.random_range(0.5..2.0),
            m_z: p.m_z + r.random_range(-0.5..0.5),
            v_z: p.v_z * r.random_range(0.5..2.0),
        };
        assert!(vb_cost(&m, x_tilde, &q) >= c_star - 1e-12);
    }
    // scaling one variance strictly increases the cost
    let mut q = p;
    q.v_y *= 2.0;
    assert!(vb_cost(&m, x_tilde, &q) > c_star + 1e-9);
}

/// Dense-grid integration of the unnormalized joint over (x, y, z):
/// +-6 posterior standard deviations, 201 points per axis.
fn quadrature_moments(m: &StaticChainModel<f64>, x_tilde: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let e = static_exact(m, x_tilde);
    let n = 201usize;
    let half_width = 6.0;
    let axes: Vec<Vec<f64>> = (0..3)
        .map(|i| {
            let sd = e.cov[i][i].sqrt();
            (0..n)
                .map(|j| e.mean[i] - half_width * sd + 2.0 * half_width * sd * j as f64 / (n - 1) as f64)
                .collect()
        })
        .collect();
    let log_joint = |x: f64, y: f64, z: f64| -> f64 {
        -(x_tilde - x).powi(2) / (2.0 * m.var_obs)
            - (x - m.w_x * y).powi(2) / (2.0 * m.var_x)
            - (y - m.w_yz * z).powi(2) / (2.0 * m.var_y)
            - (z - m.mu_z).powi(2) / (2.0 * m.var_z)
    };
    let log_mode = log_joint(e.mean[0], e.mean[1], e.mean[2]);
    let mut mass = 0.0;
    let mut mean = [0.0; 3];
    let mut second = [[0.0; 3]; 3];
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                let w = (log_joint(x, y, z) - log_mode).exp();
                mass += w;
                let v = [x, y, z];
                for i in 0..3 {
                    mean[i] += w * v[i];
                    for j in 0..3 {
                        second[i][j] += w * v[i] * v[j];
                    }
                }
            }
        }
    }
    for i in 0..3 {
        mean[i] /= mass;
    }
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = second[i][j] / mass - mean[i] * mean[j];
        }
    }
    (mean, cov)
}

#[test]
fn static_exact_agrees_with_grid_quadrature() {
    let mut r = rng(104);
    for _ in 0..3 {
        let m = StaticChainModel::<f64>::sample(&mut r);
        let x_tilde = r.random_range(-2.0..2.0);
        let e = static_exact(&m, x_tilde);
        let (mean, cov) = quadrature_moments(&m, x_tilde);
        for i in 0..3 {
            assert!((mean[i] - e.mean[i]).abs() < 1e-3, "mean[{i}]: {} vs {}", mean[i], e.mean[i]);
            for j in 0..3 {
                assert!((cov[i][j] - e.cov[i][j]).abs() < 1e-3);
            }
        }
    }
}

// ── temporal model ─────────────────────────────────────────────────────────

/// Generic per-step coordinate ascent on the VB cost with the past fixed;
/// sweeps bottom-up until stationary. Independent of the message-passing
/// implementation.
fn coordinate_ascent_step(
    model: &TemporalChainModel<f64>,
    prev: &[f64],
    x_prev: f64,
    x_t: f64,
    tol: f64,
) -> Vec<f64> {
    let levels = model.levels();
    let (sw, cw, nv) = (&model.self_weights, &model.cross_weights, &model.noise_vars);
    let mut m: Vec<f64> = prev.to_vec(); // any init works; warm start converges fast
    for _ in 0..200_000 {
        let mut delta: f64 = 0.0;
        for l in 1..=levels {
            // message from the level below (observation for l = 1)
            let below_mean = if l == 1 { x_t } else { m[l - 2] };
            let below_base = if l == 1 { sw[0] * x_prev } else { sw[l - 1] * prev[l - 2] };
            let prec_below = cw[l - 1] * cw[l - 1] / nv[l - 1];
            let pull_below = cw[l - 1] * (below_mean - below_base) / nv[l - 1];
            // own transition prior (with the level above when present)
            let own = sw[l] * prev[l - 1] + if l < levels { cw[l] * m[l] } else { 0.0 };
            let prec_own = 1.0 / nv[l];
            let new = (pull_below + own * prec_own) / (prec_below + prec_own);
            delta = delta.max((new - m[l - 1]).abs());
            m[l - 1] = new;
        }
        if delta < tol {
            break;
        }
    }
    m
}

#[test]
fn temporal_step_equals_per_step_coordinate_ascent_fixed_point() {
    let mut r = rng(105);
    for trial in 0..100 {
        let levels = if trial % 2 == 0 { 2 } else { 3 };
        let model = TemporalChainModel::<f64>::sample(&mut r, levels);
        let prev: Vec<f64> = (0..levels).map(|_| r.random_range(-1.5..1.5)).collect();
        let x_prev = r.random_range(-1.0..1.0);
        let x_t = r.random_range(-1.0..1.0);
        let post = temporal_step(&model, &prev, x_prev, x_t);
        let oracle = coordinate_ascent_step(&model, &prev, x_prev, x_t, 1e-13);
        for l in 0..levels {
            assert!(
                (post.means[l] - oracle[l]).abs() < 1e-8,
                "level {l}: {} vs {} (L={levels})",
                post.means[l],
                oracle[l]
            );
        }
    }
}

#[test]
fn multi_step_filtering_tracks_coordinate_ascent() {
    let mut r = rng(106);
    let model = TemporalChainModel::<f64>::sample(&mut r, 2);
    let mut prev = vec![0.0, 0.0];
    let mut x_prev = 0.0;
    for _ in 0..20 {
        let x_t = r.random_range(-1.0..1.0);
        let post = temporal_step(&model, &prev, x_prev, x_t);
        let oracle = coordinate_ascent_step(&model, &prev, x_prev, x_t, 1e-13);
        assert!((post.means[0] - oracle[0]).abs() < 1e-9);
        assert!((post.means[1] - oracle[1]).abs() < 1e-9);
        prev = post.means.clone();
        x_prev = x_t;
    }
}

#[test]
fn l2_step_reproduces_the_explicit_y_equations_verbatim() {
    // the explicit derivation has no observation self-term: set sw[0] = 0
    let mut r = rng(107);
    for _ in 0..100 {
        let mut model = TemporalChainModel::<f64>::sample(&mut r, 2);
        model.self_weights[0] = 0.0;
        let prev = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let x_t = r.random_range(-1.0..1.0);
        let post = temporal_step(&model, &prev, 0.33, x_t);
        let (w_y, w_yz, w_x) = (model.self_weights[1], model.cross_weights[1], model.cross_weights[0]);
        let (var_x, var_y) = (model.noise_vars[0], model.noise_vars[1]);

        // m'_y = w_y m_{y,t-1} + w_yz m'_z
        let m_prime_y = w_y * prev[0] + w_yz * post.prior_means[1];
        assert!((post.prior_means[0] - m_prime_y).abs() < 1e-12);
        // s_y = sigmoid(log(var_y w_x^2 / var_x))
        let s_y = sigmoid((var_y * w_x * w_x / var_x).ln());
        assert!((post.gates[0] - s_y).abs() < 1e-12);
        // m~_y = s_y x_t / w_x + (1 - s_y) m'_y
        let m_tilde_y = s_y * x_t / w_x + (1.0 - s_y) * m_prime_y;
        assert!((post.encoder_means[0] - m_tilde_y).abs() < 1e-12);
        // m_y = m~_y + (w_yz v_y / var_y)(m_z - m'_z)
        let v_y = 1.0 / (w_x * w_x / var_x + 1.0 / var_y);
        let m_y = m_tilde_y + w_yz * v_y / var_y * (post.means[1] - post.prior_means[1]);
        assert!((post.means[0] - m_y).abs() < 1e-12);
        // and the whole step solves the equated-derivative system
        let (m_y_eq, _, m_z_eq, _) = temporal_step_equated_l2(&model, &prev, 0.33, x_t);
        assert!((post.means[0] - m_y_eq).abs() < 1e-12);
        assert!((post.means[1] - m_z_eq).abs() < 1e-12);
    }
}
