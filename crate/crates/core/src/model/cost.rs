//! Analytic parameter and multiply-accumulate counts.
//!
//! Every "FLOP" figure is a multiply-accumulate count of the matmul, linear
//! and convolution primitives (norms, activations, pooling and softmax are
//! free), the same convention as the attention complexity `2HW(2C² + hwC)`.
//! Counts scale linearly with the batch size.

use serde::Serialize;

use super::block_kind;
use super::config::{MixerKind, ModelConfig};
use crate::attention::{AttentionKind, WindowAttention};
use crate::blocks::{gtg_repeats, Downsample, FusedMbConv, GlobalTokenGen};
use crate::mamba::{HybridLayer, HybridStageLayout, LayerKind, MambaMixer, DEFAULT_STATE};
use crate::nn::{conv_count, linear_count, mlp_count};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub downsample: usize,
    pub gtg: usize,
    pub attention: usize,
    pub mixer: usize,
    pub mlp: usize,
    pub norm: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MacBreakdown {
    pub attention: u64,
    pub mixer: u64,
    pub mlp: u64,
    pub conv: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCost {
    /// 1-based stage index.
    pub stage: usize,
    pub dim: usize,
    pub resolution: usize,
    pub window: usize,
    pub depth: usize,
    pub local_blocks: usize,
    pub global_blocks: usize,
    /// Mixer/attention pattern of hybrid stages, e.g. `MMSS`.
    pub pattern: Option<String>,
    pub gtg_repeats: usize,
    pub params: ParamBreakdown,
    pub macs: MacBreakdown,
    /// `depth · 2HW(2C² + hwC)`: the closed form applied to every block. Global
    /// blocks have no query projection, so `macs.attention` is lower by
    /// `HW·C²` per global block.
    pub attention_closed_form: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub img_size: usize,
    pub batch: usize,
    pub stem_params: usize,
    pub stem_macs: u64,
    pub stages: Vec<StageCost>,
    pub head_params: usize,
    pub head_macs: u64,
    pub total_params: usize,
    pub total_macs: u64,
    /// Totals by category; `total` includes the head.
    pub categories: MacBreakdown,
}

/// `2HW(2C² + hwC)` for one attention block over an `H × W` map split into `h × w` windows.
pub fn attention_closed_form(height: usize, width: usize, dim: usize, win_h: usize, win_w: usize) -> u64 {
    let (hw, c, n) = ((height * width) as u64, dim as u64, (win_h * win_w) as u64);
    2 * hw * (2 * c * c + n * c)
}

impl CostReport {
    pub fn analyze(cfg: &ModelConfig, batch: usize) -> CostReport {
        let b = batch as u64;
        let c = cfg.base_dim;
        let se = cfg.se_ratio;
        let stem_res = cfg.img_size / 2;
        let stem_params = conv_count(3, c, 3, 1, true) + FusedMbConv::<f32>::count(c, se);
        let stem_macs =
            b * ((stem_res * stem_res * c * 3 * 9) as u64 + FusedMbConv::<f32>::macs(c, se, stem_res, stem_res));

        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let dim = cfg.stage_dim(i);
            let cin = if i == 0 { c } else { cfg.stage_dim(i - 1) };
            let (res, win) = (cfg.stage_resolution(i), cfg.stage_window(i));
            let tokens = res * res;
            let n = win * win;
            let depth = cfg.depths[i];
            let hidden = cfg.mlp_hidden(dim);
            let heads = cfg.heads[i];

            let mut params = ParamBreakdown {
                downsample: Downsample::<f32>::count(cin, dim, se, cfg.downsampler),
                ..Default::default()
            };
            let mut macs = MacBreakdown {
                conv: b * Downsample::<f32>::macs(cin, dim, se, cfg.downsampler, 2 * res, 2 * res),
                ..Default::default()
            };
            let (mut local, mut global, mut pattern, mut reps) = (0, 0, None, 0);
            params.mlp = depth * mlp_count(dim, hidden);
            params.norm = depth * 4 * dim;
            macs.mlp = b * depth as u64 * (tokens * 2 * dim * hidden) as u64;
            match cfg.mixer {
                MixerKind::Gcvit => {
                    reps = gtg_repeats(res, win).map_or(0, |r| r as usize);
                    params.gtg = reps * FusedMbConv::<f32>::count(dim, se);
                    macs.conv += b * GlobalTokenGen::<f32>::macs(dim, se, res, win);
                    for j in 0..depth {
                        let kind = block_kind(j);
                        match kind {
                            AttentionKind::Local => local += 1,
                            AttentionKind::Global => global += 1,
                        }
                        params.attention += WindowAttention::<f32>::count(kind, dim, heads, Some(win));
                        macs.attention += b * WindowAttention::<f32>::macs(kind, dim, tokens, n);
                    }
                }
                MixerKind::MambaHybrid => {
                    let layout = HybridStageLayout::default_pattern(depth);
                    for &k in &layout.kinds {
                        let full = HybridLayer::<f32>::count(k, dim, heads, hidden, DEFAULT_STATE);
                        let rest = full - mlp_count(dim, hidden) - 4 * dim;
                        match k {
                            LayerKind::Mixer => {
                                params.mixer += rest;
                                macs.mixer += b * MambaMixer::<f32>::macs(dim, DEFAULT_STATE, tokens);
                            }
                            LayerKind::Attention => {
                                params.attention += rest;
                                macs.attention +=
                                    b * WindowAttention::<f32>::macs(AttentionKind::Local, dim, tokens, n);
                            }
                        }
                    }
                    pattern = Some(layout.to_string());
                }
            }
            params.total = params.downsample + params.gtg + params.attention + params.mixer + params.mlp + params.norm;
            macs.total = macs.attention + macs.mixer + macs.mlp + macs.conv;
            let closed = if cfg.mixer == MixerKind::Gcvit {
                depth as u64 * b * attention_closed_form(res, res, dim, win, win)
            } else {
                0
            };
            stages.push(StageCost {
                stage: i + 1,
                dim,
                resolution: res,
                window: win,
                depth,
                local_blocks: local,
                global_blocks: global,
                pattern,
                gtg_repeats: reps,
                params,
                macs,
                attention_closed_form: closed,
            });
        }

        let last = cfg.stage_dim(3);
        let head_params = 2 * last + linear_count(last, cfg.num_classes, true);
        let head_macs = b * (last * cfg.num_classes) as u64;
        let mut categories = MacBreakdown {
            conv: stem_macs,
            ..Default::default()
        };
        for s in &stages {
            categories.attention += s.macs.attention;
            categories.mixer += s.macs.mixer;
            categories.mlp += s.macs.mlp;
            categories.conv += s.macs.conv;
        }
        categories.total = categories.attention + categories.mixer + categories.mlp + categories.conv + head_macs;
        CostReport {
            variant: cfg.variant.clone(),
            img_size: cfg.img_size,
            batch,
            stem_params,
            stem_macs,
            head_params,
            head_macs,
            total_params: stem_params + stages.iter().map(|s| s.params.total).sum::<usize>() + head_params,
            total_macs: categories.total,
            stages,
            categories,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }
}
