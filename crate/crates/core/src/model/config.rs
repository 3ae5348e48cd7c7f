use serde::{Deserialize, Serialize};

use crate::blocks::{gtg_repeats, DownsamplerKind, DEFAULT_SE_RATIO};
use crate::error::{Error, Result};

/// Token mixer used inside the stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// Alternating local and global window attention.
    #[default]
    Gcvit,
    /// MambaVision mixers followed by self-attention inside each window.
    MambaHybrid,
}

/// Names accepted by [`ModelConfig::preset`].
pub const VARIANTS: [&str; 7] = ["xxt", "xt", "tiny", "small", "base", "toy", "toy-hybrid"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: String,
    pub base_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Window extent per stage; clamped to the stage resolution.
    pub windows: [usize; 4],
    pub mlp_ratio: f64,
    pub img_size: usize,
    pub num_classes: usize,
    pub se_ratio: usize,
    pub downsampler: DownsamplerKind,
    pub mixer: MixerKind,
}

/// Config document as read from disk; omitted keys fall back to the preset
/// named by `variant`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    variant: Option<String>,
    base_dim: Option<usize>,
    depths: Option<[usize; 4]>,
    heads: Option<[usize; 4]>,
    windows: Option<[usize; 4]>,
    mlp_ratio: Option<f64>,
    img_size: Option<usize>,
    num_classes: Option<usize>,
    se_ratio: Option<usize>,
    downsampler: Option<DownsamplerKind>,
    mixer: Option<MixerKind>,
}

impl<'de> Deserialize<'de> for DownsamplerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for DownsamplerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            DownsamplerKind::Conv => "conv",
            DownsamplerKind::MaxPool => "maxpool",
        })
    }
}

impl ModelConfig {
    fn gcvit(variant: &str, base_dim: usize, depths: [usize; 4], heads: [usize; 4], mlp_ratio: f64) -> Self {
        ModelConfig {
            variant: variant.into(),
            base_dim,
            depths,
            heads,
            windows: [7, 7, 14, 7],
            mlp_ratio,
            img_size: 224,
            num_classes: 1000,
            se_ratio: DEFAULT_SE_RATIO,
            downsampler: DownsamplerKind::Conv,
            mixer: MixerKind::Gcvit,
        }
    }

    /// Built-in configurations. See [`VARIANTS`].
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "xxt" => Self::gcvit("xxt", 64, [2, 2, 6, 2], [2, 4, 8, 16], 3.0),
            "xt" => Self::gcvit("xt", 64, [3, 4, 6, 5], [2, 4, 8, 16], 3.0),
            "tiny" => Self::gcvit("tiny", 64, [3, 4, 19, 5], [2, 4, 8, 16], 3.0),
            "small" => Self::gcvit("small", 96, [3, 4, 19, 5], [3, 6, 12, 24], 2.0),
            "base" => Self::gcvit("base", 128, [3, 4, 19, 5], [4, 8, 16, 32], 2.0),
            "toy" | "toy-hybrid" => ModelConfig {
                variant: name.into(),
                base_dim: 8,
                depths: [2, 2, 2, 2],
                heads: [1, 2, 4, 8],
                windows: [4, 4, 4, 4],
                mlp_ratio: 2.0,
                img_size: 32,
                num_classes: 2,
                se_ratio: DEFAULT_SE_RATIO,
                downsampler: DownsamplerKind::Conv,
                mixer: if name == "toy" {
                    MixerKind::Gcvit
                } else {
                    MixerKind::MambaHybrid
                },
            },
            other => {
                return Err(Error::Usage(format!(
                    "unknown variant {other:?}; expected one of {}",
                    VARIANTS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses a JSON config document and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConfigDoc = serde_json::from_str(text).map_err(|e| Error::Config(format!("config document: {e}")))?;
        let base = match &doc.variant {
            Some(v) if VARIANTS.contains(&v.as_str()) => Some(Self::preset(v)?),
            _ => None,
        };
        macro_rules! field {
            ($name:ident) => {
                match (doc.$name, &base) {
                    (Some(v), _) => v,
                    (None, Some(b)) => b.$name.clone(),
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "config is missing {:?} (required unless variant names a preset)",
                            stringify!($name)
                        )))
                    }
                }
            };
        }
        let cfg = ModelConfig {
            variant: doc.variant.clone().unwrap_or_else(|| "custom".into()),
            base_dim: field!(base_dim),
            depths: field!(depths),
            heads: field!(heads),
            windows: field!(windows),
            mlp_ratio: field!(mlp_ratio),
            img_size: field!(img_size),
            num_classes: field!(num_classes),
            se_ratio: doc
                .se_ratio
                .unwrap_or(base.as_ref().map_or(DEFAULT_SE_RATIO, |b| b.se_ratio)),
            downsampler: doc
                .downsampler
                .unwrap_or(base.as_ref().map_or_else(Default::default, |b| b.downsampler)),
            mixer: doc
                .mixer
                .unwrap_or(base.as_ref().map_or_else(Default::default, |b| b.mixer)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Channels of stage `i` (0-based): `C·2^i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.base_dim << i
    }

    /// Spatial extent of stage `i` (0-based): `S / 2^(i+2)`.
    pub fn stage_resolution(&self, i: usize) -> usize {
        self.img_size >> (i + 2)
    }

    /// Window extent used at stage `i`.
    pub fn stage_window(&self, i: usize) -> usize {
        self.windows[i].min(self.stage_resolution(i))
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio) as usize
    }

    /// Same architecture at another input size: each stage keeps its number of
    /// windows per side where the new resolution allows it.
    pub fn with_img_size(&self, size: usize) -> Self {
        let mut cfg = self.clone();
        cfg.img_size = size;
        for i in 0..4 {
            let (r, w) = (self.stage_resolution(i), self.stage_window(i));
            if w == 0 || r % w != 0 {
                continue;
            }
            let per_side = r / w;
            let r_new = cfg.stage_resolution(i);
            if r_new >= per_side && r_new.is_multiple_of(per_side) {
                cfg.windows[i] = r_new / per_side;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.base_dim == 0 {
            return fail("base_dim", "must be positive".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return fail("mlp_ratio", format!("must be positive, got {}", self.mlp_ratio));
        }
        if self.num_classes == 0 {
            return fail("num_classes", "must be positive".into());
        }
        if self.se_ratio == 0 {
            return fail("se_ratio", "must be positive".into());
        }
        if self.img_size < 32 || !self.img_size.is_multiple_of(32) {
            return fail(
                "img_size",
                format!("must be a positive multiple of 32, got {}", self.img_size),
            );
        }
        for i in 0..4 {
            let dim = self.stage_dim(i);
            if self.depths[i] < 2 {
                return fail(
                    &format!("depths[{i}]"),
                    format!("stage depth must be at least 2, got {}", self.depths[i]),
                );
            }
            if self.heads[i] == 0 || !dim.is_multiple_of(self.heads[i]) {
                return fail(
                    &format!("heads[{i}]"),
                    format!("stage dim {dim} not divisible by {} heads", self.heads[i]),
                );
            }
            if self.mlp_hidden(dim) == 0 {
                return fail("mlp_ratio", format!("hidden width is zero at stage {}", i + 1));
            }
            if !dim.is_multiple_of(self.se_ratio) {
                return fail(
                    "se_ratio",
                    format!("{} does not divide stage {} dim {dim}", self.se_ratio, i + 1),
                );
            }
            if self.mixer == MixerKind::MambaHybrid && !dim.is_multiple_of(2) {
                return fail("base_dim", format!("mixer stages need even width, got {dim}"));
            }
            if self.windows[i] == 0 {
                return fail(&format!("windows[{i}]"), "must be positive".into());
            }
            let (r, w) = (self.stage_resolution(i), self.stage_window(i));
            if r % w != 0 {
                return fail(
                    &format!("windows[{i}]"),
                    format!("stage {} resolution {r} is not divisible by window {w}", i + 1),
                );
            }
            if self.mixer == MixerKind::Gcvit {
                gtg_repeats(r, w).map_err(|_| {
                    Error::Config(format!(
                        "windows[{i}]: stage {} resolution {r} over window {w} is not a power of two",
                        i + 1
                    ))
                })?;
            }
        }
        Ok(())
    }
}
