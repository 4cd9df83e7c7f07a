//! Architecture presets mirroring the experiment tables, expressed in a
//! declarative one-layer-per-line text form that `--arch <file>` also
//! accepts.
//!
//! Syntax:
//! ```text
//! input <channels> <side>
//! convlstm <ch> <kh>x<kw> s<stride> | <decoder>
//! conv <ch> <kh>x<kw> s<stride>    | <decoder>
//! pool <max|avg> <kh>x<kw> s<s>    | <decoder>
//! dense <units>                    | <decoder>
//! lstm <units>                     | <decoder>
//! softmax <classes>                | <decoder>
//! ```
//! where `<decoder>` is `convg1|convg2|convg3 <kh>x<kw>`, `g1`, `identity`,
//! or `-` for none. `#` starts a comment.

use super::{ArchSpec, DecoderKind, DecoderSpec, LayerKind, LayerSpec, PoolKind};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 9] = [
    "rladder_ommnist",
    "temporal_baseline",
    "static_classifier",
    "rladder_music",
    "rtagger_textured",
    "tiny_rladder",
    "tiny_temporal_baseline",
    "tiny_static_classifier",
    "tiny_rtagger",
];

/// Occluded-moving-digit recurrent ladder (full scale).
const RLADDER_OMMNIST: &str = "
input 1 32
convlstm 32 3x3 s1 | convg3 9x9
conv 32 3x3 s1     | convg3 3x3
conv 32 3x3 s1     | convg3 3x3
conv 32 3x3 s1     | convg3 3x3
pool max 2x2 s2    | convg3 6x6
convlstm 32 3x3 s1 | convg3 9x9
conv 64 3x3 s1     | convg3 3x3
conv 64 3x3 s1     | convg3 3x3
conv 64 3x3 s1     | convg3 3x3
pool max 2x2 s2    | convg3 6x6
conv 128 3x3 s1    | convg3 3x3
conv 64 1x1 s1     | convg3 3x3
conv 32 1x1 s1     | convg3 3x3
pool avg 2x2 s2    | g1
lstm 16            | g1
softmax 10         | -
";

/// Deep feed-forward stack with recurrence only in the top LSTM.
const TEMPORAL_BASELINE: &str = "
input 1 32
conv 32 3x3 s1  | -
conv 32 3x3 s1  | -
conv 32 3x3 s1  | -
pool max 2x2 s2 | -
conv 64 3x3 s1  | -
conv 64 3x3 s1  | -
conv 64 3x3 s1  | -
pool max 2x2 s2 | -
conv 128 3x3 s1 | -
conv 64 1x1 s1  | -
conv 32 1x1 s1  | -
pool avg 2x2 s2 | -
lstm 16         | -
softmax 10      | -
";

/// Feed-forward classifier fed with reconstructed digits.
const STATIC_CLASSIFIER: &str = "
input 1 32
conv 32 3x3 s1  | -
conv 32 3x3 s1  | -
conv 32 3x3 s1  | -
pool max 2x2 s2 | -
conv 64 3x3 s1  | -
conv 64 3x3 s1  | -
conv 64 3x3 s1  | -
pool max 2x2 s2 | -
conv 128 3x3 s1 | -
conv 64 1x1 s1  | -
conv 32 1x1 s1  | -
pool avg 2x2 s2 | -
softmax 10      | -
";

/// Piano-roll next-step model; provided as a config, not exercised end to
/// end here.
const RLADDER_MUSIC: &str = "
input 1 1x88
convlstm 32 1x3 s1  | convg2 1x3
convlstm 64 1x3 s2  | convg2 1x3
convlstm 96 1x3 s2  | convg2 1x3
convlstm 128 1x3 s2 | convg2 1x3
convlstm 160 1x3 s2 | convg2 1x3
pool avg 1x2 s2     | g1
lstm 96             | g1
softmax 19          | identity
";

/// Texture-grouping ladder (full scale).
const RTAGGER_TEXTURED: &str = "
input 1 96
convlstm 96 8x8 s2  | convg1 5x5
conv 96 5x5 s1      | convg1 5x5
conv 96 5x5 s1      | convg1 5x5
convlstm 192 4x4 s2 | convg1 5x5
conv 192 5x5 s1     | convg1 5x5
conv 192 5x5 s1     | convg1 5x5
convlstm 192 4x4 s2 | convg1 5x5
conv 192 5x5 s1     | convg1 5x5
conv 192 5x5 s1     | convg1 5x5
convlstm 11 4x4 s2  | convg1 5x5
pool avg 6x6 s6     | identity
softmax 11          | g1
";

/// Desk-scale ladder: same topology family as the full table
/// (convlstm / conv / pool tiers, lstm head) at a fraction of the width.
const TINY_RLADDER: &str = "
input 1 32
convlstm 8 3x3 s1 | convg3 5x5
pool max 2x2 s2   | convg3 3x3
conv 12 3x3 s1    | convg3 3x3
pool max 2x2 s2   | convg3 3x3
convlstm 16 3x3 s1 | convg3 3x3
pool avg 2x2 s2   | g1
lstm 24           | g1
softmax 3         | -
";

const TINY_TEMPORAL_BASELINE: &str = "
input 1 32
conv 8 3x3 s1   | -
pool max 2x2 s2 | -
conv 12 3x3 s1  | -
pool max 2x2 s2 | -
conv 16 3x3 s1  | -
pool avg 2x2 s2 | -
lstm 24         | -
softmax 3       | -
";

const TINY_STATIC_CLASSIFIER: &str = "
input 1 32
conv 8 3x3 s1   | -
pool max 2x2 s2 | -
conv 12 3x3 s1  | -
pool max 2x2 s2 | -
conv 16 3x3 s1  | -
pool avg 2x2 s2 | -
softmax 3       | -
";

/// Desk-scale grouping ladder over 20x20 textured digits.
const TINY_RTAGGER: &str = "
input 4 20
convlstm 12 5x5 s2 | convg1 3x3
conv 16 3x3 s1     | convg1 3x3
convlstm 10 3x3 s2 | convg1 3x3
pool avg 5x5 s5    | identity
softmax 10         | g1
";

pub fn build_from_table(preset: &str) -> Result<ArchSpec> {
    let text = match preset {
        "rladder_ommnist" => RLADDER_OMMNIST,
        "temporal_baseline" => TEMPORAL_BASELINE,
        "static_classifier" => STATIC_CLASSIFIER,
        "rladder_music" => RLADDER_MUSIC,
        "rtagger_textured" => RTAGGER_TEXTURED,
        "tiny_rladder" => TINY_RLADDER,
        "tiny_temporal_baseline" => TINY_TEMPORAL_BASELINE,
        "tiny_static_classifier" => TINY_STATIC_CLASSIFIER,
        "tiny_rtagger" => TINY_RTAGGER,
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    parse_arch(text, preset)
}

fn parse_kernel(tok: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse(format!("bad kernel spec `{tok}`"));
    if let Some((a, b)) = tok.split_once('x') {
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    } else {
        let k: usize = tok.parse().map_err(|_| bad())?;
        Ok((k, k))
    }
}

fn parse_stride(tok: &str) -> Result<usize> {
    tok.strip_prefix('s')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad stride `{tok}`")))
}

fn parse_decoder(part: &str) -> Result<DecoderSpec> {
    let toks: Vec<&str> = part.split_whitespace().collect();
    match toks.as_slice() {
        ["-"] | [] => Ok(DecoderSpec::NONE),
        ["g1"] => Ok(DecoderSpec { kind: DecoderKind::G1, kernel: (1, 1) }),
        ["identity"] => Ok(DecoderSpec { kind: DecoderKind::Identity, kernel: (1, 1) }),
        [kind, k] => {
            let kernel = parse_kernel(k)?;
            let kind = match *kind {
                "convg1" => DecoderKind::ConvG1,
                "convg2" => DecoderKind::ConvG2,
                "convg3" => DecoderKind::ConvG3,
                other => return Err(Error::Parse(format!("unknown decoder `{other}`"))),
            };
            Ok(DecoderSpec { kind, kernel })
        }
        _ => Err(Error::Parse(format!("bad decoder spec `{part}`"))),
    }
}

/// Parses the declarative layer-table format.
pub fn parse_arch(text: &str, name: &str) -> Result<ArchSpec> {
    let mut in_channels = None;
    let mut in_side = None;
    let mut layers = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (layer_part, dec_part) = match line.split_once('|') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (line, "-"),
        };
        let toks: Vec<&str> = layer_part.split_whitespace().collect();
        match toks.as_slice() {
            ["input", ch, side] => {
                in_channels = Some(ch.parse().map_err(|_| Error::Parse(format!("bad channels `{ch}`")))?);
                // a rectangle `1x88` is accepted; the square side is its max
                let (h, w) = parse_kernel(side)?;
                in_side = Some(h.max(w));
            }
            ["conv", ch, k, s] => layers.push(LayerSpec {
                kind: LayerKind::Conv {
                    channels: ch.parse().map_err(|_| Error::Parse(format!("bad channels `{ch}`")))?,
                    kernel: parse_kernel(k)?,
                    stride: parse_stride(s)?,
                },
                decoder: parse_decoder(dec_part)?,
            }),
            ["convlstm", ch, k, s] => layers.push(LayerSpec {
                kind: LayerKind::ConvLstm {
                    channels: ch.parse().map_err(|_| Error::Parse(format!("bad channels `{ch}`")))?,
                    kernel: parse_kernel(k)?,
                    stride: parse_stride(s)?,
                },
                decoder: parse_decoder(dec_part)?,
            }),
            ["pool", kind, k, s] => layers.push(LayerSpec {
                kind: LayerKind::Pool {
                    kind: match *kind {
                        "max" => PoolKind::Max,
                        "avg" => PoolKind::Avg,
                        other => return Err(Error::Parse(format!("unknown pool `{other}`"))),
                    },
                    kernel: parse_kernel(k)?,
                    stride: parse_stride(s)?,
                },
                decoder: parse_decoder(dec_part)?,
            }),
            ["dense", units] => layers.push(LayerSpec {
                kind: LayerKind::Dense { units: units.parse().map_err(|_| Error::Parse(format!("bad units `{units}`")))? },
                decoder: parse_decoder(dec_part)?,
            }),
            ["lstm", units] => layers.push(LayerSpec {
                kind: LayerKind::DenseLstm { units: units.parse().map_err(|_| Error::Parse(format!("bad units `{units}`")))? },
                decoder: parse_decoder(dec_part)?,
            }),
            ["softmax", classes] => layers.push(LayerSpec {
                kind: LayerKind::SoftmaxHead {
                    classes: classes.parse().map_err(|_| Error::Parse(format!("bad classes `{classes}`")))?,
                },
                decoder: parse_decoder(dec_part)?,
            }),
            _ => return Err(Error::Parse(format!("cannot parse layer line `{line}`"))),
        }
    }
    let arch = ArchSpec {
        name: name.to_string(),
        in_channels: in_channels.ok_or_else(|| Error::Parse("missing input line".into()))?,
        in_side: in_side.unwrap(),
        layers,
    };
    super::propagate_shapes(&arch)?;
    Ok(arch)
}

/// Overrides the class count of the softmax head (desk-scale class subsets).
pub fn with_classes(mut arch: ArchSpec, classes: usize) -> ArchSpec {
    for layer in arch.layers.iter_mut() {
        if let LayerKind::SoftmaxHead { classes: c } = &mut layer.kind {
            *c = classes;
        }
    }
    arch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layer_one_of_the_ladder_preset() {
        let arch = build_from_table("rladder_ommnist").unwrap();
        assert_eq!(
            arch.layers[0].kind,
            LayerKind::ConvLstm { channels: 32, kernel: (3, 3), stride: 1 }
        );
        assert_eq!(arch.layers[0].decoder, DecoderSpec { kind: DecoderKind::ConvG3, kernel: (9, 9) });
        assert_eq!(arch.layers.len(), 16);
    }

    #[test]
    fn temporal_baseline_recurs_only_at_the_top() {
        let arch = build_from_table("temporal_baseline").unwrap();
        let mut recurrent = Vec::new();
        for (i, l) in arch.layers.iter().enumerate() {
            match l.kind {
                LayerKind::ConvLstm { .. } | LayerKind::DenseLstm { .. } => recurrent.push(i),
                _ => {}
            }
            assert_eq!(l.decoder, DecoderSpec::NONE);
        }
        assert_eq!(recurrent.len(), 1);
        assert!(matches!(arch.layers[recurrent[0]].kind, LayerKind::DenseLstm { units: 16 }));
        assert_eq!(recurrent[0], arch.layers.len() - 2);
    }

    #[test]
    fn rtagger_first_layer_matches_its_table() {
        let arch = build_from_table("rtagger_textured").unwrap();
        assert_eq!(
            arch.layers[0].kind,
            LayerKind::ConvLstm { channels: 96, kernel: (8, 8), stride: 2 }
        );
        assert_eq!(arch.layers[0].decoder.kind, DecoderKind::ConvG1);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(build_from_table("nope").is_err());
    }

    #[test]
    fn all_presets_parse_and_propagate_shapes() {
        for name in PRESET_NAMES {
            let arch = build_from_table(name).unwrap();
            let shapes = crate::ladder::propagate_shapes(&arch).unwrap();
            assert_eq!(shapes.len(), arch.layers.len(), "{name}");
        }
    }
}
