//! Iterative perceptual grouping: K weight-shared ladder copies refine
//! per-pixel group probabilities and per-group reconstructions under a
//! pixelwise Gaussian mixture likelihood.

pub mod ami;

pub use ami::{ami_score, argmax_groups};

use crate::cells::NormKind;
use crate::error::{Error, Result};
use crate::ladder::{ArchSpec, LadderState, RLadder, Variant};
use crate::nn::{Bound, NormSession, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Per-iteration grouping state: assignment probabilities, reconstructions,
/// and one ladder state per group.
pub struct GroupingState {
    /// [N, K, H, W], rows over K sum to one per pixel
    pub pi: Var,
    /// [N, K, H, W]
    pub mu: Var,
    pub ladders: Vec<LadderState>,
    /// aggregated class distribution [N, classes] (after the iteration)
    pub class_probs: Option<Var>,
}

pub struct RTagger<T: Scalar> {
    pub ladder: RLadder<T>,
    pub groups: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> RTagger<T> {
    /// K weight-shared copies of one ladder; the ladder input is the
    /// four-channel stack (corrupted image, pi_k, mu_k, responsibility_k)
    /// and its bottom readout provides (mu, pi-logit) per group.
    pub fn new(arch: ArchSpec, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if groups == 0 {
            return Err(Error::InvalidArg { op: "rtagger", msg: "K must be >= 1".into() });
        }
        if arch.in_channels != 4 {
            return Err(Error::InvalidArg {
                op: "rtagger",
                msg: format!("grouping ladder wants 4 input channels, arch has {}", arch.in_channels),
            });
        }
        let ladder = RLadder::new(arch, Variant::full(), NormKind::Batch, 2, rng)?;
        let mut params = ladder.params.clone();
        // learned per-group mixture variance, positive through the exp map
        params.insert("mix/log_var", Tensor::full(&[groups], T::from_f((0.25f64).ln())));
        Ok(Self { ladder, groups, params })
    }

    /// Uniform assignments with small seeded symmetry-breaking noise; means
    /// start at the per-sample input mean.
    pub fn initial_state(
        &self,
        g: &mut Graph<T>,
        x_tilde: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> GroupingState {
        let (n, h, w) = (x_tilde.shape()[0], x_tilde.shape()[2], x_tilde.shape()[3]);
        let k = self.groups;
        let hw = h * w;
        let mut pi = Tensor::<T>::zeros(&[n, k, h, w]);
        for s in 0..n {
            for p in 0..hw {
                let mut col: Vec<f64> = (0..k).map(|_| 1.0 / k as f64 + rng.random_range(-0.01..0.01)).collect();
                let sum: f64 = col.iter().sum();
                for (gi, c) in col.iter_mut().enumerate() {
                    *c /= sum;
                    pi.data_mut()[(s * k + gi) * hw + p] = T::from_f(*c);
                }
            }
        }
        let mut mu = Tensor::<T>::zeros(&[n, k, h, w]);
        for s in 0..n {
            let mean: T = x_tilde.data()[s * hw..(s + 1) * hw].iter().copied().sum::<T>()
                / T::from_f(hw as f64);
            for v in &mut mu.data_mut()[s * k * hw..(s + 1) * k * hw] {
                *v = mean;
            }
        }
        let pi = g.constant(pi);
        let mu = g.constant(mu);
        let ladders = (0..k).map(|_| self.ladder.initial_state(g, n)).collect();
        GroupingState { pi, mu, ladders, class_probs: None }
    }

    /// Pixelwise posterior responsibilities r = softmax_k(log pi_k
    /// - (x - mu_k)^2 / (2 sigma_k^2) - log sigma_k), differentiable.
    fn responsibilities(&self, g: &mut Graph<T>, x_rep: Var, state: &GroupingState, bound: &Bound) -> Result<Var> {
        let lv = bound.var("mix/log_var");
        let neg_lv = g.scale(lv, -T::one());
        let inv_var = g.exp(neg_lv);
        let half_inv = g.scale(inv_var, T::from_f(0.5));
        let diff = g.sub(x_rep, state.mu)?;
        let diff2 = g.mul(diff, diff)?;
        let penalty = g.bmul(diff2, half_inv)?;
        let log_pi = g.ln(state.pi);
        let base = g.sub(log_pi, penalty)?;
        let half_lv = g.scale(lv, T::from_f(-0.5));
        let logits = g.badd(base, half_lv)?;
        g.softmax(logits, 1)
    }

    /// One grouping iteration: every group's ladder consumes its slice of the
    /// state plus the shared input, emits its reconstruction and assignment
    /// logit, and the assignments renormalize across groups.
    pub fn iteration(
        &self,
        g: &mut Graph<T>,
        x_tilde: Var,
        state: &GroupingState,
        bound: &Bound,
        norms: &mut NormSession<T>,
    ) -> Result<GroupingState> {
        let k = self.groups;
        let x_rep = if k == 1 {
            x_tilde
        } else {
            g.concat(&vec![x_tilde; k], 1)?
        };
        let r = self.responsibilities(g, x_rep, state, bound)?;
        let mut logits = Vec::with_capacity(k);
        let mut mus = Vec::with_capacity(k);
        let mut ladders = Vec::with_capacity(k);
        let mut tops = Vec::with_capacity(k);
        for gi in 0..k {
            let pi_k = g.narrow(state.pi, 1, gi, 1)?;
            let mu_k = g.narrow(state.mu, 1, gi, 1)?;
            let r_k = g.narrow(r, 1, gi, 1)?;
            let z = g.concat(&[x_tilde, pi_k, mu_k, r_k], 1)?;
            let (trace, next) = self.ladder.ladder_step(g, z, &state.ladders[gi], bound, norms)?;
            let readout = trace.prediction.ok_or_else(|| Error::InvalidArg {
                op: "rtagger",
                msg: "grouping ladder produced no bottom readout".into(),
            })?;
            let mu_raw = g.narrow(readout, 1, 0, 1)?;
            mus.push(g.sigmoid(mu_raw));
            logits.push(g.narrow(readout, 1, 1, 1)?);
            tops.push(trace.top);
            ladders.push(next);
        }
        let pi = if k == 1 {
            // a single group owns every pixel after normalization
            let l = g.scale(logits[0], T::zero());
            g.add_const(l, T::one())
        } else {
            let stacked = g.concat(&logits, 1)?;
            g.softmax(stacked, 1)?
        };
        let mu = if k == 1 { mus[0] } else { g.concat(&mus, 1)? };
        // class aggregation: elementwise max over the group heads,
        // renormalized back to a distribution
        let mut agg = tops[0];
        for &t in &tops[1..] {
            agg = g.max_elem(agg, t)?;
        }
        let log_agg = g.ln(agg);
        let class_probs = g.softmax(log_agg, 1)?;
        Ok(GroupingState { pi, mu, ladders, class_probs: Some(class_probs) })
    }

    /// Builds the unrolled grouping graph and returns the summed training
    /// loss: per-iteration mixture likelihood plus a weighted class term at
    /// the last iteration.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &self,
        g: &mut Graph<T>,
        inputs: &[Var],
        clean_target: &Tensor<T>,
        labels: Option<&[usize]>,
        class_weight: T,
        bound: &Bound,
        norms: &mut NormSession<T>,
        init_rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<GroupingState>)> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg { op: "rtagger_train_step", msg: "iterations must be >= 1".into() });
        }
        let x0 = g.value(inputs[0]).clone();
        let mut state = self.initial_state(g, &x0, init_rng);
        let mut states = Vec::with_capacity(inputs.len());
        let mut total: Option<Var> = None;
        let lv = bound.var("mix/log_var");
        for &x in inputs {
            let next = self.iteration(g, x, &state, bound, norms)?;
            let nll = g.mixture_nll(next.pi, next.mu, lv, clean_target)?;
            total = Some(match total {
                Some(t) => g.add(t, nll)?,
                None => nll,
            });
            state = next;
            states.push(GroupingState {
                pi: state.pi,
                mu: state.mu,
                ladders: Vec::new(),
                class_probs: state.class_probs,
            });
        }
        let mut loss = total.unwrap();
        if let Some(labels) = labels {
            if class_weight != T::zero() {
                let probs = state.class_probs.expect("class output present");
                let ce = g.cross_entropy(probs, labels)?;
                let weighted = g.scale(ce, class_weight);
                loss = g.add(loss, weighted)?;
            }
        }
        Ok((loss, states))
    }
}

/// Mixture negative log likelihood of a clean image under the grouping state;
/// free-function form over raw slices for scoring outside a graph.
pub fn mixture_nll_direct<T: Scalar>(
    x: &[T],
    pi: &[T],
    mu: &[T],
    vars: &[T],
    groups: usize,
) -> T {
    let npix = x.len();
    let two_pi = T::from_f(std::f64::consts::TAU);
    let mut total = T::zero();
    for p in 0..npix {
        let mut lik = T::zero();
        for k in 0..groups {
            let d = x[p] - mu[k * npix + p];
            let pdf = (-(d * d) / (vars[k] + vars[k])).exp() / (two_pi * vars[k]).sqrt();
            lik = lik + pi[k * npix + p] * pdf;
        }
        total = total - lik.max(T::from_f(1e-12)).ln();
    }
    total / T::from_f(npix as f64)
}
