//! Full backbone: stem, four stages with a downsampler each, final norm,
//! average pooling and the linear classifier.

mod config;
mod cost;

pub use config::{MixerKind, ModelConfig, VARIANTS};
pub use cost::{CostReport, MacBreakdown, ParamBreakdown, StageCost};

use std::collections::BTreeMap;

use crate::attention::{AttentionKind, WindowAttention};
use crate::blocks::{Downsample, GlobalTokenGen};
use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::mamba::{HybridLayer, HybridStageLayout, DEFAULT_STATE};
use crate::nn::{module_fields, Ctx, LayerNorm, Linear, Mlp, Module, Param, ParamInit};
use crate::tensor::init::Initializer;
use crate::tensor::{Element, Var};
use crate::windowing::{partition_nhwc, reverse_nhwc, PatchStem, WindowLayout};

/// Pre-norm transformer block on `[B, H, W, C]` stage tokens:
/// `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct GcVitBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: WindowAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}
module_fields!(GcVitBlock {
    norm1,
    attn,
    norm2,
    mlp
});

impl<T: Element> GcVitBlock<T> {
    pub fn new(
        p: &mut ParamInit<'_>,
        kind: AttentionKind,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        Ok(GcVitBlock {
            norm1: LayerNorm::new(&mut p.scope("norm1"), dim),
            attn: WindowAttention::new(&mut p.scope("attn"), kind, dim, heads, window)?,
            norm2: LayerNorm::new(&mut p.scope("norm2"), dim),
            mlp: Mlp::new(&mut p.scope("mlp"), dim, mlp_hidden),
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.attn.kind
    }

    /// `q_global` is required for global blocks and ignored by local ones.
    pub fn forward(
        &self,
        ctx: &Ctx<T>,
        x: &Var<T>,
        layout: &WindowLayout,
        q_global: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let tokens = partition_nhwc(&self.norm1.forward(ctx, x)?, layout)?;
        let attended = match (self.kind(), q_global) {
            (AttentionKind::Local, _) => self.attn.forward_local(ctx, &tokens)?,
            (AttentionKind::Global, Some(q)) => self.attn.forward_global(ctx, &tokens, q)?,
            (AttentionKind::Global, None) => {
                return Err(Error::Usage("global block needs the stage global query".into()))
            }
        };
        let x = x.add(&reverse_nhwc(&attended.output, layout)?)?;
        let h = self.mlp.forward(ctx, &self.norm2.forward(ctx, &x)?)?;
        x.add(&h)
    }
}

#[derive(Clone, Debug)]
pub enum StageBody<T> {
    /// Alternating local/global blocks (local first) sharing one global query.
    Gcvit {
        gtg: GlobalTokenGen<T>,
        blocks: Vec<GcVitBlock<T>>,
    },
    /// Mixer and self-attention layers applied to window token sequences.
    Hybrid {
        layout: HybridStageLayout,
        layers: Vec<HybridLayer<T>>,
    },
}

impl<T: Element> Module<T> for StageBody<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            StageBody::Gcvit { gtg, blocks } => {
                gtg.visit(f);
                blocks.visit(f);
            }
            StageBody::Hybrid { layers, .. } => layers.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            StageBody::Gcvit { gtg, blocks } => {
                gtg.visit_mut(f);
                blocks.visit_mut(f);
            }
            StageBody::Hybrid { layers, .. } => layers.visit_mut(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub downsample: Downsample<T>,
    pub body: StageBody<T>,
    pub layout: WindowLayout,
    pub dim: usize,
}
module_fields!(Stage { downsample, body });

impl<T: Element> Stage<T> {
    /// Global query of this stage for already downsampled features `[B, C, H, W]`.
    pub fn global_query(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Option<Var<T>>> {
        match &self.body {
            StageBody::Gcvit { gtg, .. } => Ok(Some(gtg.forward(ctx, x)?)),
            StageBody::Hybrid { .. } => Ok(None),
        }
    }

    /// `[B, C_in, 2H, 2W] -> [B, C, H, W]`
    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let x = self.downsample.forward(ctx, x)?;
        let nhwc = x.permute(&[0, 2, 3, 1])?;
        let out = match &self.body {
            StageBody::Gcvit { blocks, .. } => {
                let q = self.global_query(ctx, &x)?;
                let mut t = nhwc;
                for block in blocks {
                    t = block.forward(ctx, &t, &self.layout, q.as_ref())?;
                }
                t
            }
            StageBody::Hybrid { layers, .. } => {
                let mut t = partition_nhwc(&nhwc, &self.layout)?;
                for layer in layers {
                    t = layer.forward(ctx, &t)?;
                }
                reverse_nhwc(&t, &self.layout)?
            }
        };
        out.permute(&[0, 3, 1, 2])
    }

    pub fn local_blocks(&self) -> usize {
        match &self.body {
            StageBody::Gcvit { blocks, .. } => blocks.iter().filter(|b| b.kind() == AttentionKind::Local).count(),
            StageBody::Hybrid { .. } => 0,
        }
    }

    pub fn global_blocks(&self) -> usize {
        match &self.body {
            StageBody::Gcvit { blocks, .. } => blocks.iter().filter(|b| b.kind() == AttentionKind::Global).count(),
            StageBody::Hybrid { .. } => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub stem: PatchStem<T>,
    pub stages: Vec<Stage<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}
module_fields!(Model {
    stem,
    stages,
    norm,
    head
});

/// Block kind at index `j` of a stage: local first, then alternating.
pub fn block_kind(j: usize) -> AttentionKind {
    if j.is_multiple_of(2) {
        AttentionKind::Local
    } else {
        AttentionKind::Global
    }
}

impl<T: Element> Model<T> {
    /// Builds and initializes a model; weights depend only on `config` and `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let mut p = ParamInit::new(&mut init);
        let c = config.base_dim;
        let stem = PatchStem::new(&mut p.scope("stem"), 3, c, config.se_ratio)?;
        let mut stages = Vec::with_capacity(4);
        let mut stage_p = p.scope("stages");
        for i in 0..4 {
            let mut sp = stage_p.scope(i);
            let dim = config.stage_dim(i);
            let cin = if i == 0 { c } else { config.stage_dim(i - 1) };
            let (res, win) = (config.stage_resolution(i), config.stage_window(i));
            let hidden = config.mlp_hidden(dim);
            let downsample = Downsample::new(
                &mut sp.scope("downsample"),
                cin,
                dim,
                config.se_ratio,
                config.downsampler,
            )?;
            let body = match config.mixer {
                MixerKind::Gcvit => {
                    let gtg = GlobalTokenGen::new(&mut sp.scope("gtg"), dim, res, win, config.se_ratio)?;
                    let mut bp = sp.scope("blocks");
                    let blocks = (0..config.depths[i])
                        .map(|j| GcVitBlock::new(&mut bp.scope(j), block_kind(j), dim, config.heads[i], win, hidden))
                        .collect::<Result<_>>()?;
                    StageBody::Gcvit { gtg, blocks }
                }
                MixerKind::MambaHybrid => {
                    let layout = HybridStageLayout::default_pattern(config.depths[i]);
                    let mut lp = sp.scope("layers");
                    let layers = layout
                        .kinds
                        .iter()
                        .enumerate()
                        .map(|(j, &k)| {
                            HybridLayer::new(&mut lp.scope(j), k, dim, config.heads[i], hidden, DEFAULT_STATE)
                        })
                        .collect::<Result<_>>()?;
                    StageBody::Hybrid { layout, layers }
                }
            };
            stages.push(Stage {
                downsample,
                body,
                layout: WindowLayout::square(res, win)?,
                dim,
            });
        }
        drop(stage_p);
        let last = config.stage_dim(3);
        Ok(Model {
            config: config.clone(),
            stem,
            stages,
            norm: LayerNorm::new(&mut p.scope("norm"), last),
            head: Linear::new(&mut p.scope("head"), last, config.num_classes, true),
        })
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let s = x.shape();
        let size = self.config.img_size;
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("model input must be [B, 3, H, W], got {s:?}")));
        }
        if s[2] != size || s[3] != size {
            return Err(Error::Config(format!(
                "input {}x{} does not match the configured {size}x{size}; stage 1 expects {}x{} with window {}",
                s[2],
                s[3],
                self.config.stage_resolution(0),
                self.config.stage_resolution(0),
                self.config.stage_window(0)
            )));
        }
        Ok(())
    }

    /// Stem output followed by each stage output, all `[B, C, H, W]`.
    pub fn forward_features(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        self.check_input(x)?;
        let mut outs = vec![self.stem.forward(ctx, x)?];
        for stage in &self.stages {
            let next = stage.forward(ctx, outs.last().expect("stem output"))?;
            outs.push(next);
        }
        Ok(outs)
    }

    /// Final features `[B, C4, H/32, W/32]` to logits `[B, classes]`.
    pub fn forward_head(&self, ctx: &Ctx<T>, features: &Var<T>) -> Result<Var<T>> {
        let pooled = self.norm.forward_channels(ctx, features)?.global_avg_pool()?;
        let _g = flops::scope(Category::Head);
        self.head.forward(ctx, &pooled)
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let feats = self.forward_features(ctx, x)?;
        self.forward_head(ctx, feats.last().expect("stage outputs"))
    }

    /// Parameter counts grouped by top-level component (`stem`, `stages.i`, `norm`, `head`).
    pub fn param_groups(&self) -> BTreeMap<String, usize> {
        let mut groups = BTreeMap::new();
        self.visit(&mut |p| {
            let name = p.name();
            let key = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["stages", i, ..] => format!("stages.{i}"),
                [first, ..] => (*first).to_owned(),
                [] => String::new(),
            };
            *groups.entry(key).or_insert(0) += p.value().numel();
        });
        groups
    }

    /// Analytic parameter and MAC report for this model's configuration.
    pub fn cost_report(&self) -> CostReport {
        CostReport::analyze(&self.config, 1)
    }
}

/// Block kinds present in a hybrid stage, for reporting.
pub fn hybrid_pattern(depth: usize) -> String {
    HybridStageLayout::default_pattern(depth).to_string()
}
