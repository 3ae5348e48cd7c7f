//! Convolutional blocks: squeeze-and-excitation, the modified Fused-MBConv,
//! the stage downsampler and the global token generator.

use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::nn::{conv_count, linear_count, module_fields, Conv2d, Ctx, LayerNorm, Linear, ParamInit};
use crate::tensor::{ConvSpec, Element, Var};

pub const DEFAULT_SE_RATIO: usize = 4;

/// `x ⊙ sigmoid(expand(relu(reduce(avgpool(x)))))`, per channel.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<T> {
    pub reduce: Linear<T>,
    pub expand: Linear<T>,
}
module_fields!(SqueezeExcite { reduce, expand });

impl<T: Element> SqueezeExcite<T> {
    pub fn new(p: &mut ParamInit<'_>, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Config(format!(
                "SE ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(SqueezeExcite {
            reduce: Linear::new(&mut p.scope("reduce"), channels, hidden, true),
            expand: Linear::new(&mut p.scope("expand"), hidden, channels, true),
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = x.global_avg_pool()?;
        let hidden = self.reduce.forward(ctx, &pooled)?.relu();
        let gate = self.expand.forward(ctx, &hidden)?.sigmoid();
        x.mul_bcast_prefix(&gate)
    }

    pub fn count(channels: usize, ratio: usize) -> usize {
        let hidden = channels / ratio;
        linear_count(channels, hidden, true) + linear_count(hidden, channels, true)
    }
}

/// Residual block: depthwise 3×3 → GELU → SE → pointwise 1×1, plus the input.
/// Channel count is preserved (no expansion).
#[derive(Clone, Debug)]
pub struct FusedMbConv<T> {
    pub dw: Conv2d<T>,
    pub se: SqueezeExcite<T>,
    pub pw: Conv2d<T>,
}
module_fields!(FusedMbConv { dw, se, pw });

impl<T: Element> FusedMbConv<T> {
    pub fn new(p: &mut ParamInit<'_>, channels: usize, se_ratio: usize) -> Result<Self> {
        Ok(FusedMbConv {
            dw: Conv2d::new(
                &mut p.scope("dw"),
                channels,
                channels,
                3,
                ConvSpec::new(1, 1, channels),
                true,
            )?,
            se: SqueezeExcite::new(&mut p.scope("se"), channels, se_ratio)?,
            pw: Conv2d::new(&mut p.scope("pw"), channels, channels, 1, ConvSpec::new(1, 0, 1), true)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.pw.weight.shape()[0]
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let _g = flops::scope(Category::Conv);
        let h = self.dw.forward(ctx, x)?.gelu();
        let h = self.se.forward(ctx, &h)?;
        self.pw.forward(ctx, &h)?.add(x)
    }

    pub fn count(channels: usize, se_ratio: usize) -> usize {
        conv_count(channels, channels, 3, channels, true)
            + SqueezeExcite::<T>::count(channels, se_ratio)
            + conv_count(channels, channels, 1, 1, true)
    }

    /// Multiply-accumulates at spatial extent `h × w`.
    pub fn macs(channels: usize, se_ratio: usize, h: usize, w: usize) -> u64 {
        let hidden = channels / se_ratio;
        let hw = (h * w) as u64;
        let c = channels as u64;
        hw * c * 9 + 2 * c * hidden as u64 + hw * c * c
    }
}

/// Spatial reduction used between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownsamplerKind {
    /// Fused-MBConv, strided 3×3 conv, LayerNorm.
    #[default]
    Conv,
    /// Fused-MBConv, 3×3/2 max pool, 1×1 conv, LayerNorm.
    MaxPool,
}

impl std::str::FromStr for DownsamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(DownsamplerKind::Conv),
            "maxpool" => Ok(DownsamplerKind::MaxPool),
            other => Err(Error::Config(format!(
                "unknown downsampler {other:?} (expected \"conv\" or \"maxpool\")"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Downsample<T> {
    pub mbconv: FusedMbConv<T>,
    pub reduction: Conv2d<T>,
    pub norm: LayerNorm<T>,
    pub kind: DownsamplerKind,
}
module_fields!(Downsample {
    mbconv,
    reduction,
    norm
});

impl<T: Element> Downsample<T> {
    pub fn new(p: &mut ParamInit<'_>, cin: usize, cout: usize, se_ratio: usize, kind: DownsamplerKind) -> Result<Self> {
        let mbconv = FusedMbConv::new(&mut p.scope("mbconv"), cin, se_ratio)?;
        let reduction = match kind {
            DownsamplerKind::Conv => {
                Conv2d::new(&mut p.scope("reduction"), cin, cout, 3, ConvSpec::new(2, 1, 1), true)?
            }
            DownsamplerKind::MaxPool => {
                Conv2d::new(&mut p.scope("reduction"), cin, cout, 1, ConvSpec::new(1, 0, 1), true)?
            }
        };
        Ok(Downsample {
            mbconv,
            reduction,
            norm: LayerNorm::new(&mut p.scope("norm"), cout),
            kind,
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "downsample needs even spatial extents, got {s:?}"
            )));
        }
        let _g = flops::scope(Category::Conv);
        let h = self.mbconv.forward(ctx, x)?;
        let h = match self.kind {
            DownsamplerKind::Conv => self.reduction.forward(ctx, &h)?,
            DownsamplerKind::MaxPool => self.reduction.forward(ctx, &h.maxpool2d(3, 2, 1)?)?,
        };
        self.norm.forward_channels(ctx, &h)
    }

    pub fn count(cin: usize, cout: usize, se_ratio: usize, kind: DownsamplerKind) -> usize {
        let k = match kind {
            DownsamplerKind::Conv => 3,
            DownsamplerKind::MaxPool => 1,
        };
        FusedMbConv::<T>::count(cin, se_ratio) + conv_count(cin, cout, k, 1, true) + 2 * cout
    }

    /// MACs for an input of extent `h × w`.
    pub fn macs(cin: usize, cout: usize, se_ratio: usize, kind: DownsamplerKind, h: usize, w: usize) -> u64 {
        let k2 = match kind {
            DownsamplerKind::Conv => 9,
            DownsamplerKind::MaxPool => 1,
        };
        FusedMbConv::<T>::macs(cin, se_ratio, h, w) + ((h / 2) * (w / 2) * cout * cin * k2) as u64
    }
}

/// Number of (Fused-MBConv, max-pool) repetitions taking extent `resolution`
/// down to `window`: `log2(resolution / window)`.
pub fn gtg_repeats(resolution: usize, window: usize) -> Result<u32> {
    if window == 0 || !resolution.is_multiple_of(window) || !(resolution / window).is_power_of_two() {
        return Err(Error::Config(format!(
            "global token generator needs resolution/window to be a power of two, got {resolution}/{window}"
        )));
    }
    Ok((resolution / window).trailing_zeros())
}

/// Produces the stage-shared global query `[B, C, h, w]` from stage features.
#[derive(Clone, Debug)]
pub struct GlobalTokenGen<T> {
    pub stages: Vec<FusedMbConv<T>>,
    pub resolution: usize,
    pub window: usize,
}
module_fields!(GlobalTokenGen { stages });

impl<T: Element> GlobalTokenGen<T> {
    pub fn new(
        p: &mut ParamInit<'_>,
        channels: usize,
        resolution: usize,
        window: usize,
        se_ratio: usize,
    ) -> Result<Self> {
        let reps = gtg_repeats(resolution, window)?;
        let stages = (0..reps)
            .map(|i| FusedMbConv::new(&mut p.scope(i), channels, se_ratio))
            .collect::<Result<_>>()?;
        Ok(GlobalTokenGen {
            stages,
            resolution,
            window,
        })
    }

    pub fn repeats(&self) -> usize {
        self.stages.len()
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::Shape(format!(
                "global token generator built for {0}x{0}, got {s:?}",
                self.resolution
            )));
        }
        let _g = flops::scope(Category::Conv);
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.forward(ctx, &h)?.maxpool2d(3, 2, 1)?;
        }
        Ok(h)
    }

    pub fn macs(channels: usize, se_ratio: usize, resolution: usize, window: usize) -> u64 {
        let mut r = resolution;
        let mut total = 0;
        while r > window {
            total += FusedMbConv::<T>::macs(channels, se_ratio, r, r);
            r /= 2;
        }
        total
    }
}
