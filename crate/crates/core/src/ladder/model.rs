//! Parameter declaration and per-step graph construction for the recurrent
//! ladder.
//!
//! Conventions realized here:
//! - the bottom level output is the observed frame itself; layer l's encoder
//!   cell consumes the concatenation of the output from below and (when a
//!   decoder cell exists at l) the layer's own decoder output from the
//!   previous step, resized to the incoming resolution;
//! - decoder cell at layer l blends the lateral encoder output e_l with the
//!   adapted output of the nearest decoder above (the top cell sees the top
//!   encoder output);
//! - a small convolution over the bottom decoder output reads out the
//!   next-frame prediction (or the grouping readout channels).

use super::{ArchSpec, DecoderKind, LayerKind, LayerShape, PoolKind, Variant};
use crate::cells::{
    conv_g1_cell, conv_g2_cell, conv_g3_cell, conv_lstm_step, declare_conv_g1, declare_conv_g2,
    declare_conv_g3, declare_conv_lstm, declare_g1, declare_lstm, g1_cell, lstm_step, NormKind,
    RecurrentState,
};
use crate::error::{Error, Result};
use crate::nn::{he_uniform, Bound, NormSession, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Padding, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub const PRED_KERNEL: usize = 3;

/// Per-layer recurrent states and previous decoder outputs threaded through
/// the unroll.
#[derive(Clone)]
pub struct LadderState {
    pub rec: Vec<Option<RecurrentState>>,
    pub dec_prev: Vec<Option<Var>>,
}

/// Everything one step exposes: per-layer encoder outputs, per-layer decoder
/// outputs, the top (class) output, and the bottom readout.
pub struct StepTrace {
    pub e: Vec<Var>,
    pub d: Vec<Option<Var>>,
    pub top: Var,
    /// raw bottom readout [N, readout_channels, side, side]
    pub prediction: Option<Var>,
    pub enc_input_counts: Vec<usize>,
    pub dec_input_counts: Vec<usize>,
}

pub struct RLadder<T: Scalar> {
    pub arch: ArchSpec,
    pub variant: Variant,
    pub shapes: Vec<LayerShape>,
    pub params: ParamSet<T>,
    /// normalization inside ConvLSTM input convolutions
    pub enc_norm: NormKind,
    pub readout_channels: usize,
}

fn takes_decoder_feedback(kind: &LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Conv { .. } | LayerKind::ConvLstm { .. } | LayerKind::Dense { .. } | LayerKind::DenseLstm { .. }
    )
}

fn map_of(shape: &LayerShape) -> Option<(usize, usize)> {
    match *shape {
        LayerShape::Map { ch, side } => Some((ch, side)),
        LayerShape::Flat { .. } => None,
    }
}

impl<T: Scalar> RLadder<T> {
    /// Declares every parameter of the architecture under the given variant.
    /// Decoder parameters exist only when the variant has a decoder.
    pub fn new(
        arch: ArchSpec,
        variant: Variant,
        enc_norm: NormKind,
        readout_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        variant.validate()?;
        let shapes = super::propagate_shapes(&arch)?;
        let mut params = ParamSet::new();
        let mut below = LayerShape::Map { ch: arch.in_channels, side: arch.in_side };

        for (i, layer) in arch.layers.iter().enumerate() {
            let d_slot = layer.decoder.kind != DecoderKind::None && takes_decoder_feedback(&layer.kind);
            match layer.kind {
                LayerKind::Conv { channels, kernel, .. } => {
                    let (bc, _) = map_of(&below).ok_or_else(|| Error::InvalidArg {
                        op: "arch",
                        msg: format!("layer {i}: conv after flat"),
                    })?;
                    let (sc, _) = map_of(&shapes[i]).unwrap();
                    let c_in = bc + if d_slot { sc } else { 0 };
                    let p = format!("enc{i}/conv");
                    params.insert(format!("{p}/k"), he_uniform(rng, &[channels, c_in, kernel.0, kernel.1], c_in * kernel.0 * kernel.1));
                    params.insert(format!("{p}/b"), Tensor::zeros(&[channels]));
                    params.insert(format!("{p}/gamma"), Tensor::ones(&[channels]));
                    params.insert(format!("{p}/beta"), Tensor::zeros(&[channels]));
                }
                LayerKind::ConvLstm { channels, kernel, .. } => {
                    let (bc, _) = map_of(&below).ok_or_else(|| Error::InvalidArg {
                        op: "arch",
                        msg: format!("layer {i}: convlstm after flat"),
                    })?;
                    let (sc, _) = map_of(&shapes[i]).unwrap();
                    let c_in = bc + if d_slot { sc } else { 0 };
                    declare_conv_lstm(&mut params, rng, &format!("enc{i}/convlstm"), c_in, channels, kernel.0, enc_norm);
                    if kernel.0 != kernel.1 {
                        // rectangular recurrent kernels appear only in the
                        // provided-but-unexercised piano-roll table
                        let p = format!("enc{i}/convlstm");
                        let wx = params.get_mut(&format!("{p}/wx")).unwrap();
                        *wx = he_uniform(rng, &[4 * channels, c_in, kernel.0, kernel.1], c_in * kernel.0 * kernel.1);
                        let wh = params.get_mut(&format!("{p}/wh")).unwrap();
                        *wh = he_uniform(rng, &[4 * channels, channels, kernel.0, kernel.1], channels * kernel.0 * kernel.1);
                    }
                }
                LayerKind::Pool { .. } => {}
                LayerKind::Dense { units } => {
                    let in_dim = below.numel() + if d_slot { shapes[i].numel() } else { 0 };
                    let p = format!("enc{i}/dense");
                    params.insert(format!("{p}/w"), he_uniform(rng, &[units, in_dim], in_dim));
                    params.insert(format!("{p}/b"), Tensor::zeros(&[units]));
                    params.insert(format!("{p}/gamma"), Tensor::ones(&[units]));
                    params.insert(format!("{p}/beta"), Tensor::zeros(&[units]));
                }
                LayerKind::DenseLstm { units } => {
                    let in_dim = below.numel() + if d_slot { shapes[i].numel() } else { 0 };
                    declare_lstm(&mut params, rng, &format!("enc{i}/lstm"), in_dim, units);
                }
                LayerKind::SoftmaxHead { classes } => {
                    let in_dim = below.numel();
                    let p = format!("enc{i}/head");
                    params.insert(format!("{p}/w"), he_uniform(rng, &[classes, in_dim], in_dim));
                    params.insert(format!("{p}/b"), Tensor::zeros(&[classes]));
                }
            }
            below = shapes[i];
        }

        let model = Self { arch, variant, shapes, params, enc_norm, readout_channels };
        let mut this = model;
        if this.variant.decoder_enabled {
            this.declare_decoder(rng)?;
        }
        Ok(this)
    }

    fn declare_decoder(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        // walk top to bottom, tracking the shape feeding each decoder cell
        let mut v_shape = *self.shapes.last().expect("nonempty arch");
        let mut bottom_ch = None;
        for i in (0..self.arch.layers.len()).rev() {
            let spec = self.arch.layers[i].decoder;
            if spec.kind == DecoderKind::None {
                continue;
            }
            let target = self.shapes[i];
            let v_ch = match v_shape {
                LayerShape::Map { ch, .. } => ch,
                LayerShape::Flat { dim } => dim,
            };
            match spec.kind {
                DecoderKind::G1 => {
                    declare_g1(&mut self.params, rng, &format!("dec{i}/g1"), v_shape.numel(), target.numel());
                }
                DecoderKind::ConvG1 => {
                    let (tc, _) = map_of(&target).ok_or_else(|| Error::InvalidArg {
                        op: "arch",
                        msg: format!("layer {i}: convg1 on flat shape"),
                    })?;
                    declare_conv_g1(&mut self.params, rng, &format!("dec{i}/convg1"), v_ch, tc, spec.kernel.0);
                }
                DecoderKind::ConvG2 => {
                    let (tc, _) = map_of(&target).ok_or(Error::InvalidArg {
                        op: "arch",
                        msg: format!("layer {i}: convg2 on flat shape"),
                    })?;
                    declare_conv_g2(&mut self.params, rng, &format!("dec{i}/convg2"), v_ch, tc, spec.kernel.0);
                }
                DecoderKind::ConvG3 => {
                    let (tc, _) = map_of(&target).ok_or(Error::InvalidArg {
                        op: "arch",
                        msg: format!("layer {i}: convg3 on flat shape"),
                    })?;
                    declare_conv_g3(&mut self.params, rng, &format!("dec{i}/convg3"), v_ch, tc, spec.kernel.0);
                }
                DecoderKind::Identity => {
                    if v_shape.numel() != target.numel() && v_ch != map_of(&target).map(|(c, _)| c).unwrap_or(usize::MAX) {
                        return Err(Error::InvalidArg {
                            op: "arch",
                            msg: format!("layer {i}: identity decoder cannot match shapes"),
                        });
                    }
                }
                DecoderKind::None => unreachable!(),
            }
            v_shape = target;
            bottom_ch = Some(match target {
                LayerShape::Map { ch, .. } => ch,
                LayerShape::Flat { dim } => dim,
            });
        }
        if let Some(cb) = bottom_ch {
            self.params.insert(
                "pred/conv/k",
                he_uniform(rng, &[self.readout_channels, cb, PRED_KERNEL, PRED_KERNEL], cb * PRED_KERNEL * PRED_KERNEL),
            );
            self.params.insert("pred/conv/b", Tensor::<T>::zeros(&[self.readout_channels]));
        }
        Ok(())
    }

    pub fn initial_state(&self, g: &mut Graph<T>, batch: usize) -> LadderState {
        let mut rec = Vec::with_capacity(self.arch.layers.len());
        for (i, layer) in self.arch.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::ConvLstm { .. } => {
                    let (ch, side) = map_of(&self.shapes[i]).unwrap();
                    let h = g.constant(Tensor::zeros(&[batch, ch, side, side]));
                    let c = g.constant(Tensor::zeros(&[batch, ch, side, side]));
                    rec.push(Some(RecurrentState { h, c }));
                }
                LayerKind::DenseLstm { units } => {
                    let h = g.constant(Tensor::zeros(&[batch, units]));
                    let c = g.constant(Tensor::zeros(&[batch, units]));
                    rec.push(Some(RecurrentState { h, c }));
                }
                _ => rec.push(None),
            }
        }
        LadderState { rec, dec_prev: vec![None; self.arch.layers.len()] }
    }

    fn natural_zeros(&self, g: &mut Graph<T>, batch: usize, shape: &LayerShape) -> Var {
        match *shape {
            LayerShape::Map { ch, side } => g.constant(Tensor::zeros(&[batch, ch, side, side])),
            LayerShape::Flat { dim } => g.constant(Tensor::zeros(&[batch, dim])),
        }
    }

    /// Resizes `v` (map or flat) to a map at `side`; flat vectors become
    /// constant maps broadcast from 1x1.
    fn adapt_to_map(&self, g: &mut Graph<T>, v: Var, side: usize) -> Result<Var> {
        let shape = g.value(v).shape().to_vec();
        let v = if shape.len() == 2 {
            g.reshape(v, &[shape[0], shape[1], 1, 1])?
        } else {
            v
        };
        let cur = g.value(v).shape()[2];
        if cur == side {
            Ok(v)
        } else if side % cur == 0 {
            g.upsample_nearest(v, side / cur)
        } else {
            Err(Error::InvalidArg {
                op: "decoder adapt",
                msg: format!("cannot resize side {cur} to {side}"),
            })
        }
    }

    fn flatten(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let shape = g.value(v).shape().to_vec();
        let n: usize = shape[1..].iter().product();
        g.reshape(v, &[shape[0], n])
    }

    fn to_natural(&self, g: &mut Graph<T>, v: Var, shape: &LayerShape, batch: usize) -> Result<Var> {
        match *shape {
            LayerShape::Map { ch, side } => {
                let cur = g.value(v).shape().to_vec();
                if cur.len() == 2 {
                    g.reshape(v, &[batch, ch, side, side])
                } else {
                    Ok(v)
                }
            }
            LayerShape::Flat { .. } => self.flatten(g, v),
        }
    }

    /// One bottom-up plus top-down pass; returns the trace and the state for
    /// the next step.
    pub fn ladder_step(
        &self,
        g: &mut Graph<T>,
        x: Var,
        state: &LadderState,
        bound: &Bound,
        norms: &mut NormSession<T>,
    ) -> Result<(StepTrace, LadderState)> {
        let batch = g.value(x).shape()[0];
        let n_layers = self.arch.layers.len();
        let mut e: Vec<Var> = Vec::with_capacity(n_layers);
        let mut new_rec: Vec<Option<RecurrentState>> = vec![None; n_layers];
        let mut enc_input_counts = Vec::with_capacity(n_layers);
        let mut cur = x;

        for (i, layer) in self.arch.layers.iter().enumerate() {
            let d_slot = layer.decoder.kind != DecoderKind::None && takes_decoder_feedback(&layer.kind);
            let mut inputs = 1usize;
            // decoder-to-encoder feedback from the previous step; the slot
            // exists whenever the table declares a decoder cell and is fed
            // zeros when the decoder or the feedback link is ablated
            let d_in: Option<Var> = if d_slot {
                inputs += 1;
                let live = state.dec_prev[i]
                    .filter(|_| self.variant.decoder_enabled && self.variant.dec_to_enc_enabled);
                Some(match live {
                    Some(v) => v,
                    None => self.natural_zeros(g, batch, &self.shapes[i]),
                })
            } else {
                None
            };
            let out = match layer.kind {
                LayerKind::Conv { stride, .. } => {
                    let cat = match d_in {
                        Some(d) => {
                            let side = g.value(cur).shape()[2];
                            let dm = self.adapt_to_map(g, d, side)?;
                            g.concat(&[cur, dm], 1)?
                        }
                        None => cur,
                    };
                    let p = format!("enc{i}/conv");
                    let pre = g.conv2d(cat, bound.var(&format!("{p}/k")), Some(bound.var(&format!("{p}/b"))), stride, Padding::Same)?;
                    let normed = norms.batch_norm(g, pre, bound.var(&format!("{p}/gamma")), bound.var(&format!("{p}/beta")), &p)?;
                    g.relu(normed)
                }
                LayerKind::ConvLstm { stride, .. } => {
                    inputs += 1;
                    let cat = match d_in {
                        Some(d) => {
                            let side = g.value(cur).shape()[2];
                            let dm = self.adapt_to_map(g, d, side)?;
                            g.concat(&[cur, dm], 1)?
                        }
                        None => cur,
                    };
                    let prev = state.rec[i].expect("recurrent state present");
                    let (out, st) =
                        conv_lstm_step(g, bound, &format!("enc{i}/convlstm"), cat, prev, stride, self.enc_norm, norms)?;
                    new_rec[i] = Some(st);
                    out
                }
                LayerKind::Pool { kind, kernel, stride } => match kind {
                    PoolKind::Max => g.max_pool(cur, kernel.0, kernel.1, stride)?,
                    PoolKind::Avg => g.avg_pool(cur, kernel.0, kernel.1, stride)?,
                },
                LayerKind::Dense { .. } => {
                    let flat = self.flatten(g, cur)?;
                    let cat = match d_in {
                        Some(d) => {
                            let df = self.flatten(g, d)?;
                            g.concat(&[flat, df], 1)?
                        }
                        None => flat,
                    };
                    let p = format!("enc{i}/dense");
                    let pre = g.affine(cat, bound.var(&format!("{p}/w")), bound.var(&format!("{p}/b")))?;
                    let normed = norms.batch_norm(g, pre, bound.var(&format!("{p}/gamma")), bound.var(&format!("{p}/beta")), &p)?;
                    g.relu(normed)
                }
                LayerKind::DenseLstm { .. } => {
                    inputs += 1;
                    let flat = self.flatten(g, cur)?;
                    let cat = match d_in {
                        Some(d) => {
                            let df = self.flatten(g, d)?;
                            g.concat(&[flat, df], 1)?
                        }
                        None => flat,
                    };
                    let prev = state.rec[i].expect("recurrent state present");
                    let (out, st) = lstm_step(g, bound, &format!("enc{i}/lstm"), cat, prev)?;
                    new_rec[i] = Some(st);
                    out
                }
                LayerKind::SoftmaxHead { .. } => {
                    let flat = self.flatten(g, cur)?;
                    let p = format!("enc{i}/head");
                    let logits = g.affine(flat, bound.var(&format!("{p}/w")), bound.var(&format!("{p}/b")))?;
                    g.softmax(logits, 1)?
                }
            };
            enc_input_counts.push(inputs);
            e.push(out);
            cur = out;
        }

        // top-down pass
        let mut d: Vec<Option<Var>> = vec![None; n_layers];
        let mut dec_input_counts = Vec::new();
        let mut prediction = None;
        if self.variant.decoder_enabled {
            let mut v = *e.last().unwrap();
            let mut bottom = None;
            for i in (0..n_layers).rev() {
                let spec = self.arch.layers[i].decoder;
                if spec.kind == DecoderKind::None {
                    continue;
                }
                let h = e[i];
                let out = match spec.kind {
                    DecoderKind::G1 => {
                        let vf = self.flatten(g, v)?;
                        let hf = self.flatten(g, h)?;
                        let y = g1_cell(g, bound, &format!("dec{i}/g1"), vf, hf, norms)?;
                        dec_input_counts.push(2);
                        self.to_natural(g, y, &self.shapes[i], batch)?
                    }
                    DecoderKind::ConvG1 | DecoderKind::ConvG2 | DecoderKind::ConvG3 => {
                        let (_, side) = map_of(&self.shapes[i]).unwrap();
                        let vm = self.adapt_to_map(g, v, side)?;
                        dec_input_counts.push(2);
                        match spec.kind {
                            DecoderKind::ConvG1 => conv_g1_cell(g, bound, &format!("dec{i}/convg1"), vm, h, norms)?,
                            DecoderKind::ConvG2 => conv_g2_cell(g, bound, &format!("dec{i}/convg2"), vm, h)?,
                            _ => conv_g3_cell(g, bound, &format!("dec{i}/convg3"), vm, h)?,
                        }
                    }
                    DecoderKind::Identity => match self.shapes[i] {
                        LayerShape::Map { ch: _, side } => self.adapt_to_map(g, v, side)?,
                        LayerShape::Flat { .. } => self.flatten(g, v)?,
                    },
                    DecoderKind::None => unreachable!(),
                };
                d[i] = Some(out);
                v = out;
                bottom = Some(out);
            }
            if let Some(db) = bottom {
                let dm = self.adapt_to_map(g, db, self.arch.in_side)?;
                let raw = g.conv2d(
                    dm,
                    bound.var("pred/conv/k"),
                    Some(bound.var("pred/conv/b")),
                    1,
                    Padding::Same,
                )?;
                prediction = Some(raw);
            }
        }

        let trace = StepTrace {
            top: *e.last().unwrap(),
            e,
            d: d.clone(),
            prediction,
            enc_input_counts,
            dec_input_counts,
        };
        let new_state = LadderState { rec: new_rec, dec_prev: d };
        Ok((trace, new_state))
    }

    /// Threads the state through one `ladder_step` per frame.
    pub fn unroll(
        &self,
        g: &mut Graph<T>,
        frames: &[Var],
        bound: &Bound,
        norms: &mut NormSession<T>,
    ) -> Result<Vec<StepTrace>> {
        assert!(!frames.is_empty(), "unroll needs at least one step");
        let batch = g.value(frames[0]).shape()[0];
        let mut state = self.initial_state(g, batch);
        let mut traces = Vec::with_capacity(frames.len());
        for &x in frames {
            let (trace, next) = self.ladder_step(g, x, &state, bound, norms)?;
            traces.push(trace);
            state = next;
        }
        Ok(traces)
    }
}
