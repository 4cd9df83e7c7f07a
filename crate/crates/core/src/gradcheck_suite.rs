//! The registered finite-difference suite: one entry per differentiable op
//! and per cell, exercised end-to-end (inputs and parameters).

use crate::cells::{
    conv_g1_cell, conv_g2_cell, conv_g3_cell, conv_lstm_step, declare_conv_g1, declare_conv_g2,
    declare_conv_g3, declare_conv_lstm, declare_g1, declare_lstm, f_dec, g1_cell, lstm_step,
    NormKind, RecurrentState,
};
use crate::error::Result;
use crate::gradcheck::{check_gradient, rand_tensor, rand_tensor_offzero, rng_from, OpCheck};
use crate::nn::{Bound, NormSession, ParamSet, Phase, RunningStats, BN_MOMENTUM};
use crate::tensor::{BnMode, Graph, Padding, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;

/// Projects a tensor to a scalar with fixed pseudo-random weights so that
/// every output element influences the loss.
fn project(g: &mut Graph<f64>, v: Var) -> Var {
    let n = g.value(v).len();
    let w = Tensor::from_fn(g.value(v).shape(), |i| {
        0.3 + 0.7 * ((i * 2654435761 % n.max(1)) as f64 / n.max(1) as f64)
    });
    let wv = g.constant(w);
    let p = g.mul(v, wv).expect("project");
    g.sum_all(p)
}

fn simple(name: &'static str, f: impl Fn(u64) -> Result<f64> + Sync + 'static) -> OpCheck {
    OpCheck { name, run: Box::new(f) }
}

/// Builds a randomized instance of a declared cell and checks gradients with
/// respect to the listed inputs and every parameter.
fn check_cell(
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    params: ParamSet<f64>,
    build: impl Fn(&mut Graph<f64>, &[Var], &Bound) -> Result<Var>,
) -> Result<f64> {
    let mut rng = rng_from(seed ^ 0xABCD);
    let mut randomized = params;
    for (_, t) in randomized.iter_mut() {
        for v in t.data_mut() {
            *v = 0.7 * *v + rng.random_range(-0.4..0.4);
        }
    }
    let names: Vec<String> = randomized.names().cloned().collect();
    let n_inputs = inputs.len();
    let mut all = inputs;
    for name in &names {
        all.push(randomized.get(name).unwrap().clone());
    }
    check_gradient(&all, move |g, vars| {
        let mut map = BTreeMap::new();
        for (i, name) in names.iter().enumerate() {
            map.insert(name.clone(), vars[n_inputs + i]);
        }
        let bound = Bound::from_vars(map);
        build(g, &vars[..n_inputs], &bound)
    })
}

pub fn standard_suite() -> Vec<OpCheck> {
    let mut checks: Vec<OpCheck> = Vec::new();

    checks.push(simple("add", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        check_gradient(&[a, b], |g, v| {
            let y = g.add(v[0], v[1])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("sub", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        check_gradient(&[a, b], |g, v| {
            let y = g.sub(v[0], v[1])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("mul", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
        check_gradient(&[a, b], |g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("max_elem", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[8], -1.0, 1.0);
        // keep elements well separated so FD does not cross the tie
        let b: Tensor<f64> = Tensor::from_fn(&[8], |i| a.data()[i] + if i % 2 == 0 { 0.5 } else { -0.5 });
        check_gradient(&[a, b], |g, v| {
            let y = g.max_elem(v[0], v[1])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("scale_add_const", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[7], -1.0, 1.0);
        check_gradient(&[a], |g, v| {
            let y = g.scale(v[0], -1.7);
            let y = g.add_const(y, 0.3);
            Ok(project(g, y))
        })
    }));
    checks.push(simple("broadcast_mul_add", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let p = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let q = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        check_gradient(&[x, p, q], |g, v| {
            let y = g.bmul(v[0], v[1])?;
            let y = g.badd(y, v[2])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("affine", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        check_gradient(&[x, w, b], |g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("conv2d_same_s1", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        check_gradient(&[x, k, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("conv2d_same_s2_even_kernel", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
        check_gradient(&[x, k], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, Padding::Same)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("conv2d_valid_s2", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        check_gradient(&[x, k], |g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, Padding::Valid)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("max_pool", |seed| {
        let mut rng = rng_from(seed);
        // distinct values keep the argmax stable under the FD step
        let mut x = rand_tensor::<f64>(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += (i % 7) as f64 * 0.01;
        }
        check_gradient(&[x], |g, v| {
            let y = g.max_pool(v[0], 2, 2, 2)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("avg_pool", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        check_gradient(&[x], |g, v| {
            let y = g.avg_pool(v[0], 2, 2, 2)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("upsample_nearest", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        check_gradient(&[x], |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("sigmoid", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[9], -2.0, 2.0);
        check_gradient(&[x], |g, v| {
            let y = g.sigmoid(v[0]);
            Ok(project(g, y))
        })
    }));
    checks.push(simple("tanh", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[9], -2.0, 2.0);
        check_gradient(&[x], |g, v| {
            let y = g.tanh(v[0]);
            Ok(project(g, y))
        })
    }));
    checks.push(simple("relu", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor_offzero(&mut rng, &[10], 1.5);
        check_gradient(&[x], |g, v| {
            let y = g.relu(v[0]);
            Ok(project(g, y))
        })
    }));
    checks.push(simple("exp_ln", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[7], 0.2, 2.0);
        check_gradient(&[x], |g, v| {
            let e = g.exp(v[0]);
            let l = g.ln(e);
            let s = g.add(e, l)?;
            Ok(project(g, s))
        })
    }));
    checks.push(simple("softmax_rows", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        check_gradient(&[x], |g, v| {
            let y = g.softmax(v[0], 1)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("softmax_channels_4d", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2], -2.0, 2.0);
        check_gradient(&[x], |g, v| {
            let y = g.softmax(v[0], 1)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("concat_narrow", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        check_gradient(&[a, b], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.narrow(y, 1, 1, 3)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("reshape_mean", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
        check_gradient(&[a], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            Ok(g.mean_all(y))
        })
    }));
    checks.push(simple("batch_norm_train", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[4, 3, 2, 2], -1.0, 1.0);
        let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        check_gradient(&[x, gamma, beta], |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("batch_norm_eval", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
        let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        check_gradient(&[x, gamma, beta], |g, v| {
            let (y, _) = g.batch_norm(
                v[0],
                v[1],
                v[2],
                BnMode::Eval { mean: vec![0.1, -0.2], var: vec![0.9, 1.4] },
            )?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("layer_norm", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
        let gain = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let bias = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        check_gradient(&[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("cross_entropy_of_softmax", |seed| {
        let mut rng = rng_from(seed);
        let x = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        check_gradient(&[x], move |g, v| {
            let p = g.softmax(v[0], 1)?;
            g.cross_entropy(p, &targets)
        })
    }));
    checks.push(simple("mse_loss", |seed| {
        let mut rng = rng_from(seed);
        let a = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        check_gradient(&[a, b], |g, v| g.mse_loss(v[0], v[1]))
    }));
    checks.push(simple("bernoulli_nll", |seed| {
        let mut rng = rng_from(seed);
        let p = rand_tensor(&mut rng, &[3, 4], 0.1, 0.9);
        let target = rand_tensor::<f64>(&mut rng, &[3, 4], 0.0, 1.0);
        check_gradient(&[p], move |g, v| g.bernoulli_nll(v[0], &target))
    }));
    checks.push(simple("mixture_nll", |seed| {
        let mut rng = rng_from(seed);
        let pi = rand_tensor(&mut rng, &[2, 3, 2, 2], 0.1, 0.9);
        let mu = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let lv = rand_tensor(&mut rng, &[3], -1.0, 0.5);
        let x = rand_tensor::<f64>(&mut rng, &[2, 1, 2, 2], -1.0, 1.0);
        check_gradient(&[pi, mu, lv], move |g, v| g.mixture_nll(v[0], v[1], v[2], &x))
    }));
    checks.push(simple("f_dec", |seed| {
        let mut rng = rng_from(seed);
        let u = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.5, 1.5);
        let w: Vec<Tensor<f64>> = (0..5).map(|_| rand_tensor(&mut rng, &[3], -1.0, 1.0)).collect();
        let mut inputs = vec![u];
        inputs.extend(w);
        check_gradient(&inputs, |g, v| {
            let y = f_dec(g, v[0], &[v[1], v[2], v[3], v[4], v[5]])?;
            Ok(project(g, y))
        })
    }));

    // ── cells, end to end ──
    checks.push(simple("g1_cell", |seed| {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        declare_g1(&mut params, &mut rng, "g1", 3, 4);
        let v_top = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let h = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        check_cell(seed, vec![v_top, h], params, |g, inp, bound| {
            let mut stats = RunningStats::default();
            let mut ns = NormSession::new(Phase::Train, &mut stats, BN_MOMENTUM);
            let y = g1_cell(g, bound, "g1", inp[0], inp[1], &mut ns)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("conv_g1_cell", |seed| {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        declare_conv_g1(&mut params, &mut rng, "cg1", 2, 3, 3);
        let v_top = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let h = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        check_cell(seed, vec![v_top, h], params, |g, inp, bound| {
            let mut stats = RunningStats::default();
            let mut ns = NormSession::new(Phase::Train, &mut stats, BN_MOMENTUM);
            let y = conv_g1_cell(g, bound, "cg1", inp[0], inp[1], &mut ns)?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("conv_g2_cell", |seed| {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        declare_conv_g2(&mut params, &mut rng, "cg2", 2, 2, 3);
        let v_top = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let h = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        check_cell(seed, vec![v_top, h], params, |g, inp, bound| {
            let y = conv_g2_cell(g, bound, "cg2", inp[0], inp[1])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("conv_g3_cell", |seed| {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        declare_conv_g3(&mut params, &mut rng, "cg3", 2, 2, 3);
        let v_top = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let h = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        check_cell(seed, vec![v_top, h], params, |g, inp, bound| {
            let y = conv_g3_cell(g, bound, "cg3", inp[0], inp[1])?;
            Ok(project(g, y))
        })
    }));
    checks.push(simple("lstm_step", |seed| {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        declare_lstm(&mut params, &mut rng, "lstm", 3, 4);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let h0 = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let c0 = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        check_cell(seed, vec![x, h0, c0], params, |g, inp, bound| {
            let state = RecurrentState { h: inp[1], c: inp[2] };
            let (out, _) = lstm_step(g, bound, "lstm", inp[0], state)?;
            Ok(project(g, out))
        })
    }));
    checks.push(simple("conv_lstm_step_ln", |seed| {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        declare_conv_lstm(&mut params, &mut rng, "cl", 2, 3, 3, NormKind::Layer);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let h0 = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let c0 = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        check_cell(seed, vec![x, h0, c0], params, |g, inp, bound| {
            let mut stats = RunningStats::default();
            let mut ns = NormSession::new(Phase::Train, &mut stats, BN_MOMENTUM);
            let state = RecurrentState { h: inp[1], c: inp[2] };
            let (out, st) = conv_lstm_step(g, bound, "cl", inp[0], state, 1, NormKind::Layer, &mut ns)?;
            let a = project(g, out);
            let b = project(g, st.c);
            g.add(a, b)
        })
    }));
    checks.push(simple("conv_lstm_step_bn_strided", |seed| {
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        declare_conv_lstm(&mut params, &mut rng, "clb", 2, 2, 3, NormKind::Batch);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let h0 = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        let c0 = rand_tensor(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        check_cell(seed, vec![x, h0, c0], params, |g, inp, bound| {
            let mut stats = RunningStats::default();
            let mut ns = NormSession::new(Phase::Train, &mut stats, BN_MOMENTUM);
            let state = RecurrentState { h: inp[1], c: inp[2] };
            let (out, _) = conv_lstm_step(g, bound, "clb", inp[0], state, 2, NormKind::Batch, &mut ns)?;
            Ok(project(g, out))
        })
    }));

    checks
}
