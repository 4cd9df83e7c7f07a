//! The cell zoo: recurrent encoder cells (LSTM, ConvLSTM) and the four
//! decoder cell kinds, each a pure function from inputs and parameters to
//! outputs. Parameters are declared into a [`ParamSet`] under
//! `<prefix>/<param>` and bound per graph.

use crate::error::Result;
use crate::nn::{he_uniform, orthogonal, Bound, NormSession, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Padding, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Hidden and memory tensors of an LSTM-family cell; both share one shape.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Var,
}

/// Normalization applied after the input convolution of a ConvLSTM and inside
/// decoder gating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Layer,
    Batch,
}

// ── f gate ──────────────────────────────────────────────────────────────────

/// Declares the five per-unit vectors of an `f` gate, initialized to
/// (1,1,0,0,0) which makes f(u) = sigmoid(u).
pub fn declare_fgate<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, n: usize) {
    for (i, v) in [1.0, 1.0, 0.0, 0.0, 0.0].iter().enumerate() {
        params.insert(format!("{prefix}/w{i}"), Tensor::full(&[n], T::from_f(*v)));
    }
}

pub fn bind_fgate(bound: &Bound, prefix: &str) -> [Var; 5] {
    [0, 1, 2, 3, 4].map(|i| bound.var(&format!("{prefix}/w{i}")))
}

/// f(u, w) = w0 * sigmoid(w1 * u + w2) + w3 * u + w4, elementwise with the
/// w_i broadcast per unit (channel for 4-D maps, feature otherwise).
pub fn f_dec<T: Scalar>(g: &mut Graph<T>, u: Var, w: &[Var; 5]) -> Result<Var> {
    let t = g.bmul(u, w[1])?;
    let t = g.badd(t, w[2])?;
    let s = g.sigmoid(t);
    let a = g.bmul(s, w[0])?;
    let b = g.bmul(u, w[3])?;
    let ab = g.add(a, b)?;
    g.badd(ab, w[4])
}

fn one_minus<T: Scalar>(g: &mut Graph<T>, s: Var) -> Var {
    let neg = g.scale(s, -T::one());
    g.add_const(neg, T::one())
}

// ── G1 / convG1 ─────────────────────────────────────────────────────────────

pub fn declare_g1<T: Scalar>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, out_dim: usize) {
    params.insert(format!("{prefix}/a"), he_uniform(rng, &[out_dim, in_dim], in_dim));
    params.insert(format!("{prefix}/b"), Tensor::zeros(&[out_dim]));
    params.insert(format!("{prefix}/gamma"), Tensor::ones(&[out_dim]));
    params.insert(format!("{prefix}/beta"), Tensor::zeros(&[out_dim]));
    declare_fgate(params, &format!("{prefix}/ws"), out_dim);
    declare_fgate(params, &format!("{prefix}/w"), out_dim);
}

/// u = BN(A v_top + b); s = f(u, w_s); y = s .* h + (1-s) .* f(u, w).
pub fn g1_cell<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    v_top: Var,
    h: Var,
    norms: &mut NormSession<T>,
) -> Result<Var> {
    let u_pre = g.affine(v_top, bound.var(&format!("{prefix}/a")), bound.var(&format!("{prefix}/b")))?;
    let u = norms.batch_norm(
        g,
        u_pre,
        bound.var(&format!("{prefix}/gamma")),
        bound.var(&format!("{prefix}/beta")),
        prefix,
    )?;
    gate_blend(g, bound, prefix, u, h)
}

fn gate_blend<T: Scalar>(g: &mut Graph<T>, bound: &Bound, prefix: &str, u: Var, h: Var) -> Result<Var> {
    let ws = bind_fgate(bound, &format!("{prefix}/ws"));
    let w = bind_fgate(bound, &format!("{prefix}/w"));
    let s = f_dec(g, u, &ws)?;
    let fu = f_dec(g, u, &w)?;
    let sh = g.mul(s, h)?;
    let om = one_minus(g, s);
    let omf = g.mul(om, fu)?;
    g.add(sh, omf)
}

pub fn declare_conv_g1<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    params.insert(format!("{prefix}/a"), he_uniform(rng, &[c_out, c_in, k, k], c_in * k * k));
    params.insert(format!("{prefix}/b"), Tensor::zeros(&[c_out]));
    params.insert(format!("{prefix}/gamma"), Tensor::ones(&[c_out]));
    params.insert(format!("{prefix}/beta"), Tensor::zeros(&[c_out]));
    declare_fgate(params, &format!("{prefix}/ws"), c_out);
    declare_fgate(params, &format!("{prefix}/w"), c_out);
}

/// convG1: the affine map of G1 replaced by a same-padding convolution.
pub fn conv_g1_cell<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    v_top: Var,
    h: Var,
    norms: &mut NormSession<T>,
) -> Result<Var> {
    let b = bound.var(&format!("{prefix}/b"));
    let u_pre = g.conv2d(v_top, bound.var(&format!("{prefix}/a")), Some(b), 1, Padding::Same)?;
    let u = norms.batch_norm(
        g,
        u_pre,
        bound.var(&format!("{prefix}/gamma")),
        bound.var(&format!("{prefix}/beta")),
        prefix,
    )?;
    gate_blend(g, bound, prefix, u, h)
}

// ── convG2 ──────────────────────────────────────────────────────────────────

pub fn declare_conv_g2<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    for branch in ["mu1", "mu2", "s"] {
        params.insert(format!("{prefix}/{branch}/a"), he_uniform(rng, &[c_out, c_in, k, k], c_in * k * k));
        params.insert(format!("{prefix}/{branch}/b"), he_uniform(rng, &[c_out, c_out, k, k], c_out * k * k));
        params.insert(format!("{prefix}/{branch}/c"), Tensor::zeros(&[c_out]));
        for side in ["lna", "lnb"] {
            params.insert(format!("{prefix}/{branch}/{side}/gain"), Tensor::ones(&[c_out]));
            params.insert(format!("{prefix}/{branch}/{side}/bias"), Tensor::zeros(&[c_out]));
        }
        declare_fgate(params, &format!("{prefix}/{branch}/w"), c_out);
    }
}

fn g2_branch<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    branch: &str,
    v_top: Var,
    h: Var,
) -> Result<Var> {
    let p = format!("{prefix}/{branch}");
    let av = g.conv2d(v_top, bound.var(&format!("{p}/a")), None, 1, Padding::Same)?;
    let av = g.layer_norm(av, bound.var(&format!("{p}/lna/gain")), bound.var(&format!("{p}/lna/bias")))?;
    let bh = g.conv2d(h, bound.var(&format!("{p}/b")), None, 1, Padding::Same)?;
    let bh = g.layer_norm(bh, bound.var(&format!("{p}/lnb/gain")), bound.var(&format!("{p}/lnb/bias")))?;
    let sum = g.add(av, bh)?;
    let with_c = g.badd(sum, bound.var(&format!("{p}/c")))?;
    let w = bind_fgate(bound, &format!("{p}/w"));
    f_dec(g, with_c, &w)
}

/// mu1, mu2, s = f(LN(A_i * v_top) + LN(B_i * h) + c_i, w_i);
/// y = s .* mu1 + (1-s) .* mu2.
pub fn conv_g2_cell<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    v_top: Var,
    h: Var,
) -> Result<Var> {
    let mu1 = g2_branch(g, bound, prefix, "mu1", v_top, h)?;
    let mu2 = g2_branch(g, bound, prefix, "mu2", v_top, h)?;
    let s = g2_branch(g, bound, prefix, "s", v_top, h)?;
    let a = g.mul(s, mu1)?;
    let om = one_minus(g, s);
    let b = g.mul(om, mu2)?;
    g.add(a, b)
}

// ── convG3 ──────────────────────────────────────────────────────────────────

pub fn declare_conv_g3<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    params.insert(format!("{prefix}/a"), he_uniform(rng, &[c_out, c_in, k, k], c_in * k * k));
    params.insert(format!("{prefix}/b"), he_uniform(rng, &[c_out, c_out, k, k], c_out * k * k));
    params.insert(format!("{prefix}/c"), Tensor::zeros(&[c_out]));
    params.insert(format!("{prefix}/wsk"), he_uniform(rng, &[c_out, c_out, k, k], c_out * k * k));
    params.insert(format!("{prefix}/d"), he_uniform(rng, &[c_out, c_out, k, k], c_out * k * k));
    params.insert(format!("{prefix}/e"), he_uniform(rng, &[c_out, c_out, k, k], c_out * k * k));
    for side in ["lna", "lnb"] {
        params.insert(format!("{prefix}/{side}/gain"), Tensor::ones(&[c_out]));
        params.insert(format!("{prefix}/{side}/bias"), Tensor::zeros(&[c_out]));
    }
}

/// u = relu(LN(A*v_top) + LN(B*h) + c); s = sigmoid(W_s*u);
/// y = s .* (D*u) + (1-s) .* (E*u).
pub fn conv_g3_cell<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    v_top: Var,
    h: Var,
) -> Result<Var> {
    let av = g.conv2d(v_top, bound.var(&format!("{prefix}/a")), None, 1, Padding::Same)?;
    let av = g.layer_norm(av, bound.var(&format!("{prefix}/lna/gain")), bound.var(&format!("{prefix}/lna/bias")))?;
    let bh = g.conv2d(h, bound.var(&format!("{prefix}/b")), None, 1, Padding::Same)?;
    let bh = g.layer_norm(bh, bound.var(&format!("{prefix}/lnb/gain")), bound.var(&format!("{prefix}/lnb/bias")))?;
    let sum = g.add(av, bh)?;
    let pre = g.badd(sum, bound.var(&format!("{prefix}/c")))?;
    let u = g.relu(pre);
    let s_pre = g.conv2d(u, bound.var(&format!("{prefix}/wsk")), None, 1, Padding::Same)?;
    let s = g.sigmoid(s_pre);
    let du = g.conv2d(u, bound.var(&format!("{prefix}/d")), None, 1, Padding::Same)?;
    let eu = g.conv2d(u, bound.var(&format!("{prefix}/e")), None, 1, Padding::Same)?;
    let sd = g.mul(s, du)?;
    let om = one_minus(g, s);
    let oe = g.mul(om, eu)?;
    g.add(sd, oe)
}

// ── LSTM ────────────────────────────────────────────────────────────────────

/// Gate layout along the stacked axis: input, forget, output, candidate.
/// Forget-gate bias starts at +1.
pub fn declare_lstm<T: Scalar>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, hidden: usize) {
    params.insert(format!("{prefix}/wx"), he_uniform(rng, &[4 * hidden, in_dim], in_dim));
    // recurrent map: orthogonal per gate block
    let mut wh = Tensor::<T>::zeros(&[4 * hidden, hidden]);
    for gate in 0..4 {
        let block = orthogonal::<T>(rng, hidden, hidden);
        wh.data_mut()[gate * hidden * hidden..(gate + 1) * hidden * hidden].copy_from_slice(block.data());
    }
    params.insert(format!("{prefix}/wh"), wh);
    let mut b = Tensor::<T>::zeros(&[4 * hidden]);
    for i in hidden..2 * hidden {
        b.data_mut()[i] = T::one();
    }
    params.insert(format!("{prefix}/b"), b);
}

pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    state: RecurrentState,
) -> Result<(Var, RecurrentState)> {
    let wx = bound.var(&format!("{prefix}/wx"));
    let wh = bound.var(&format!("{prefix}/wh"));
    let b = bound.var(&format!("{prefix}/b"));
    let hidden = g.value(wh).shape()[1];
    let zero_b = g.constant(Tensor::zeros(&[4 * hidden]));
    let gx = g.affine(x, wx, b)?;
    let gh = g.affine(state.h, wh, zero_b)?;
    let z = g.add(gx, gh)?;
    lstm_gates(g, z, state, 1, hidden)
}

fn lstm_gates<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    state: RecurrentState,
    axis: usize,
    hidden: usize,
) -> Result<(Var, RecurrentState)> {
    let i_pre = g.narrow(z, axis, 0, hidden)?;
    let f_pre = g.narrow(z, axis, hidden, hidden)?;
    let o_pre = g.narrow(z, axis, 2 * hidden, hidden)?;
    let c_pre = g.narrow(z, axis, 3 * hidden, hidden)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.tanh(c_pre);
    let fc = g.mul(f, state.c)?;
    let ic = g.mul(i, cand)?;
    let c_new = g.add(fc, ic)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, RecurrentState { h: h_new, c: c_new }))
}

// ── ConvLSTM ────────────────────────────────────────────────────────────────

pub fn declare_conv_lstm<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    norm: NormKind,
) {
    params.insert(format!("{prefix}/wx"), he_uniform(rng, &[4 * c_out, c_in, k, k], c_in * k * k));
    params.insert(format!("{prefix}/wh"), he_uniform(rng, &[4 * c_out, c_out, k, k], c_out * k * k));
    let mut b = Tensor::<T>::zeros(&[4 * c_out]);
    for i in c_out..2 * c_out {
        b.data_mut()[i] = T::one();
    }
    params.insert(format!("{prefix}/b"), b);
    match norm {
        NormKind::None => {}
        NormKind::Layer => {
            params.insert(format!("{prefix}/ln/gain"), Tensor::ones(&[4 * c_out]));
            params.insert(format!("{prefix}/ln/bias"), Tensor::zeros(&[4 * c_out]));
        }
        NormKind::Batch => {
            params.insert(format!("{prefix}/bn/gamma"), Tensor::ones(&[4 * c_out]));
            params.insert(format!("{prefix}/bn/beta"), Tensor::zeros(&[4 * c_out]));
        }
    }
}

/// ConvLSTM step. The input convolution may stride; the hidden state then
/// lives at the strided resolution. The first convolution of the inputs is
/// normalized per `norm` (layer norm in the ladder stacks, batch norm in the
/// grouping stacks).
#[allow(clippy::too_many_arguments)]
pub fn conv_lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    state: RecurrentState,
    stride: usize,
    norm: NormKind,
    norms: &mut NormSession<T>,
) -> Result<(Var, RecurrentState)> {
    let wx = bound.var(&format!("{prefix}/wx"));
    let wh = bound.var(&format!("{prefix}/wh"));
    let b = bound.var(&format!("{prefix}/b"));
    let c_out = g.value(wh).shape()[1];
    let gx = g.conv2d(x, wx, None, stride, Padding::Same)?;
    let gx = match norm {
        NormKind::None => gx,
        NormKind::Layer => g.layer_norm(
            gx,
            bound.var(&format!("{prefix}/ln/gain")),
            bound.var(&format!("{prefix}/ln/bias")),
        )?,
        NormKind::Batch => norms.batch_norm(
            g,
            gx,
            bound.var(&format!("{prefix}/bn/gamma")),
            bound.var(&format!("{prefix}/bn/beta")),
            prefix,
        )?,
    };
    let gh = g.conv2d(state.h, wh, None, 1, Padding::Same)?;
    let zsum = g.add(gx, gh)?;
    let z = g.badd(zsum, b)?;
    lstm_gates(g, z, state, 1, c_out)
}
