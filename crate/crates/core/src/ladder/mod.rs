//! The recurrent ladder computational graph: a stack of stateful encoder
//! cells and stateless decoder cells unrolled over time, decoder outputs
//! feeding the next step's encoders, plus the ablation variants.

pub mod model;
pub mod presets;

pub use model::{LadderState, RLadder, StepTrace};
pub use presets::{build_from_table, parse_arch, PRESET_NAMES};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Encoder layer kinds of the architecture tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { channels: usize, kernel: (usize, usize), stride: usize },
    ConvLstm { channels: usize, kernel: (usize, usize), stride: usize },
    Pool { kind: PoolKind, kernel: (usize, usize), stride: usize },
    Dense { units: usize },
    DenseLstm { units: usize },
    SoftmaxHead { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    G1,
    ConvG1,
    ConvG2,
    ConvG3,
    Identity,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub kernel: (usize, usize),
}

impl DecoderSpec {
    pub const NONE: Self = Self { kind: DecoderKind::None, kernel: (1, 1) };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub decoder: DecoderSpec,
}

/// Whole-network architecture: input geometry plus the layer table.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    pub in_side: usize,
    pub layers: Vec<LayerSpec>,
}

/// Output geometry of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerShape {
    Map { ch: usize, side: usize },
    Flat { dim: usize },
}

impl LayerShape {
    pub fn numel(&self) -> usize {
        match *self {
            LayerShape::Map { ch, side } => ch * side * side,
            LayerShape::Flat { dim } => dim,
        }
    }
}

/// Ablation flags realizing the comparison table rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub decoder_enabled: bool,
    pub dec_to_enc_enabled: bool,
    pub prediction_task_enabled: bool,
    pub classification_task_enabled: bool,
    pub temporal_baseline: bool,
    pub hierarchical_rnn: bool,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            decoder_enabled: true,
            dec_to_enc_enabled: true,
            prediction_task_enabled: true,
            classification_task_enabled: true,
            temporal_baseline: false,
            hierarchical_rnn: false,
        }
    }

    pub fn hierarchical_rnn() -> Self {
        Self {
            decoder_enabled: false,
            dec_to_enc_enabled: false,
            prediction_task_enabled: false,
            classification_task_enabled: true,
            temporal_baseline: false,
            hierarchical_rnn: true,
        }
    }

    pub fn temporal_baseline() -> Self {
        Self {
            decoder_enabled: false,
            dec_to_enc_enabled: false,
            prediction_task_enabled: false,
            classification_task_enabled: true,
            temporal_baseline: true,
            hierarchical_rnn: false,
        }
    }

    pub fn static_classifier() -> Self {
        Self {
            decoder_enabled: false,
            dec_to_enc_enabled: false,
            prediction_task_enabled: false,
            classification_task_enabled: true,
            temporal_baseline: false,
            hierarchical_rnn: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_baseline && self.decoder_enabled {
            return Err(Error::InvalidArg {
                op: "variant",
                msg: "temporal baseline has no decoder".into(),
            });
        }
        if self.prediction_task_enabled && !self.decoder_enabled {
            return Err(Error::InvalidArg {
                op: "variant",
                msg: "prediction task needs the decoder".into(),
            });
        }
        Ok(())
    }
}

/// Propagates the input geometry through the layer table; fails on any
/// inconsistency at construction time, not step time.
pub fn propagate_shapes(arch: &ArchSpec) -> Result<Vec<LayerShape>> {
    let mut shapes = Vec::with_capacity(arch.layers.len());
    let mut cur = LayerShape::Map { ch: arch.in_channels, side: arch.in_side };
    for (i, layer) in arch.layers.iter().enumerate() {
        cur = match layer.kind {
            LayerKind::Conv { channels, stride, .. } | LayerKind::ConvLstm { channels, stride, .. } => {
                match cur {
                    LayerShape::Map { side, .. } => {
                        LayerShape::Map { ch: channels, side: side.div_ceil(stride) }
                    }
                    LayerShape::Flat { .. } => {
                        return Err(Error::InvalidArg {
                            op: "arch",
                            msg: format!("layer {i}: convolution after a flat layer"),
                        })
                    }
                }
            }
            LayerKind::Pool { kernel, stride, .. } => match cur {
                LayerShape::Map { ch, side } => {
                    if side < kernel.0 {
                        return Err(Error::InvalidArg {
                            op: "arch",
                            msg: format!("layer {i}: pool kernel {} on side {side}", kernel.0),
                        });
                    }
                    LayerShape::Map { ch, side: (side - kernel.0) / stride + 1 }
                }
                LayerShape::Flat { .. } => {
                    return Err(Error::InvalidArg { op: "arch", msg: format!("layer {i}: pool after flat") })
                }
            },
            LayerKind::Dense { units } | LayerKind::DenseLstm { units } => LayerShape::Flat { dim: units },
            LayerKind::SoftmaxHead { classes } => LayerShape::Flat { dim: classes },
        };
        shapes.push(cur);
    }
    Ok(shapes)
}
