//! Finite-difference verification of tape gradients (f64, central differences).

use crate::error::{Error, Result};
use crate::nn::{Ctx, Module, Param};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic − numeric| / max(1, |analytic|)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Usage(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn scalar(v: &Var<f64>) -> Result<f64> {
    if v.value().numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.value().item())
}

fn with_element(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut d = t.to_vec();
    d[i] += delta;
    Tensor::from_vec(t.shape(), d).expect("same shape")
}

/// Indices to probe: all of them, or `limit` evenly spaced ones.
fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `h`.
pub fn gradcheck(f: impl Fn(&Var<f64>) -> Result<Var<f64>>, x: &Tensor<f64>, h: f64) -> Result<f64> {
    let errs = gradcheck_inputs(|xs| f(&xs[0]), std::slice::from_ref(x), h, None)?;
    Ok(errs[0])
}

/// Multi-input variant: one max relative error per input. `limit` caps the
/// number of probed elements per input.
pub fn gradcheck_inputs(
    f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    inputs: &[Tensor<f64>],
    h: f64,
    limit: Option<usize>,
) -> Result<Vec<f64>> {
    check_step(h)?;
    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&leaves)?;
    scalar(&out)?;
    let grads = out.backward()?;
    let mut errs = Vec::with_capacity(inputs.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        let mut worst: f64 = 0.0;
        for i in probe_indices(inputs[k].numel(), limit) {
            let eval = |delta: f64| -> Result<f64> {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| Var::constant(if j == k { with_element(t, i, delta) } else { t.clone() }))
                    .collect();
                scalar(&f(&vars)?)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
        errs.push(worst);
    }
    Ok(errs)
}

/// Result of checking one module: worst error over inputs and parameters.
#[derive(Debug, Clone)]
pub struct ModuleCheck {
    pub input_err: f64,
    pub param_err: f64,
    /// Parameter with the largest error.
    pub worst_param: Option<String>,
}

impl ModuleCheck {
    pub fn max_err(&self) -> f64 {
        self.input_err.max(self.param_err)
    }
}

/// Checks gradients of a scalar function of a module with respect to its
/// inputs and every parameter. `limit` caps probed elements per tensor;
/// `skew` is added to every analytic gradient (0 for a genuine check, nonzero
/// only as a negative control).
pub fn check_module<M: Module<f64> + Clone>(
    module: &M,
    inputs: &[Tensor<f64>],
    h: f64,
    limit: Option<usize>,
    skew: f64,
    f: impl Fn(&M, &Ctx<f64>, &[Var<f64>]) -> Result<Var<f64>>,
) -> Result<ModuleCheck> {
    check_step(h)?;
    let ctx = Ctx::train();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| ctx.leaf(t.clone())).collect();
    let out = f(module, &ctx, &leaves)?;
    scalar(&out)?;
    let grads = out.backward()?;

    let eval_with = |m: &M, xs: &[Tensor<f64>]| -> Result<f64> {
        let ctx = Ctx::eval();
        let vars: Vec<Var<f64>> = xs.iter().map(|t| Var::constant(t.clone())).collect();
        scalar(&f(m, &ctx, &vars)?)
    };

    let mut input_err: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        for i in probe_indices(inputs[k].numel(), limit) {
            let mut plus = inputs.to_vec();
            plus[k] = with_element(&inputs[k], i, h);
            let mut minus = inputs.to_vec();
            minus[k] = with_element(&inputs[k], i, -h);
            let numeric = (eval_with(module, &plus)? - eval_with(module, &minus)?) / (2.0 * h);
            input_err = input_err.max(rel_err(analytic.data()[i] + skew, numeric));
        }
    }

    let names: Vec<(String, Tensor<f64>)> = module
        .params()
        .iter()
        .map(|p: &&Param<f64>| (p.name().to_owned(), p.value().clone()))
        .collect();
    let mut param_err: f64 = 0.0;
    let mut worst_param = None;
    for (name, value) in &names {
        let analytic = ctx
            .param_grad(&grads, name)
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in probe_indices(value.numel(), limit) {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut m = module.clone();
                m.visit_mut(&mut |p| {
                    if p.name() == name {
                        p.set(with_element(value, i, delta)).expect("same shape");
                    }
                });
                eval_with(&m, inputs)
            };
            let numeric = (perturbed(h)? - perturbed(-h)?) / (2.0 * h);
            let e = rel_err(analytic.data()[i] + skew, numeric);
            if e > param_err {
                param_err = e;
                worst_param = Some(name.clone());
            }
        }
    }
    Ok(ModuleCheck {
        input_err,
        param_err,
        worst_param,
    })
}

/// Gradient checks for each exported block and for the two toy models.
pub mod suite {
    use serde::Serialize;

    use super::{check_module, gradcheck_inputs, rel_err, DEFAULT_STEP};
    use crate::attention::{AttentionKind, WindowAttention};
    use crate::blocks::{Downsample, DownsamplerKind, FusedMbConv, GlobalTokenGen, SqueezeExcite};
    use crate::error::{Error, Result};
    use crate::mamba::{selective_scan, HybridLayer, LayerKind, MambaMixer};
    use crate::model::{Model, ModelConfig};
    use crate::nn::{Ctx, Mlp, Module, ParamInit};
    use crate::tensor::init::Initializer;
    use crate::tensor::{Tensor, Var};
    use crate::windowing::PatchStem;

    /// Maximum relative error accepted for a single block.
    pub const BLOCK_TOLERANCE: f64 = 1e-6;
    /// Maximum relative error accepted for an end-to-end model.
    pub const MODEL_TOLERANCE: f64 = 1e-5;
    /// Probed elements per tensor in end-to-end checks.
    pub const MODEL_PROBES: usize = 4;

    pub const BLOCKS: [&str; 14] = [
        "squeeze_excite",
        "fused_mbconv",
        "downsample",
        "downsample_maxpool",
        "global_token_gen",
        "patch_stem",
        "mlp",
        "local_attention",
        "global_attention",
        "selective_scan",
        "mamba_mixer",
        "hybrid_layers",
        "toy_model",
        "toy_hybrid_model",
    ];

    #[derive(Debug, Clone, Serialize)]
    pub struct BlockResult {
        pub block: String,
        pub max_rel_err: f64,
        pub tolerance: f64,
        pub passed: bool,
        /// Parameter (or input) with the largest error.
        pub worst: Option<String>,
    }

    /// Replaces every parameter with `N(0, std²)` draws so no gradient is
    /// hidden by near-zero initial weights.
    fn randomize<M: Module<f64>>(m: &mut M, seed: u64, std: f64) {
        let mut init = Initializer::new(seed);
        m.visit_mut(&mut |p| {
            let t = init.randn(p.shape(), std);
            p.set(t).expect("same shape");
        });
    }

    fn build<M>(seed: u64, f: impl FnOnce(&mut ParamInit<'_>) -> Result<M>) -> Result<M> {
        let mut init = Initializer::new(seed);
        f(&mut ParamInit::new(&mut init))
    }

    /// `Σ out ⊙ w` with fixed random weights `w`.
    fn weighted(out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
        let w = Var::constant(Initializer::new(seed ^ 0x5eed).randn(out.shape(), 1.0));
        Ok(out.mul(&w)?.sum())
    }

    fn module_check<M: Module<f64> + Clone>(
        name: &str,
        mut module: M,
        inputs: Vec<Tensor<f64>>,
        seed: u64,
        skew: f64,
        f: impl Fn(&M, &Ctx<f64>, &[Var<f64>]) -> Result<Var<f64>>,
    ) -> Result<BlockResult> {
        randomize(&mut module, seed + 1, 0.5);
        let r = check_module(&module, &inputs, DEFAULT_STEP, None, skew, |m, ctx, xs| {
            weighted(&f(m, ctx, xs)?, seed)
        })?;
        let worst = if r.input_err >= r.param_err {
            Some("input".to_owned())
        } else {
            r.worst_param.clone()
        };
        Ok(result(name, r.max_err(), BLOCK_TOLERANCE, worst))
    }

    fn result(name: &str, err: f64, tolerance: f64, worst: Option<String>) -> BlockResult {
        BlockResult {
            block: name.to_owned(),
            max_rel_err: err,
            tolerance,
            passed: err < tolerance,
            worst,
        }
    }

    fn model_check(name: &str, variant: &str, seed: u64, skew: f64) -> Result<BlockResult> {
        let cfg = ModelConfig::preset(variant)?;
        let model: Model<f64> = Model::build(&cfg, seed)?;
        let x = Initializer::new(seed + 2).randn(&[2, 3, cfg.img_size, cfg.img_size], 1.0);
        let r = check_module(&model, &[x], DEFAULT_STEP, Some(MODEL_PROBES), skew, |m, ctx, xs| {
            m.forward(ctx, &xs[0])?.cross_entropy(&[0, 1])
        })?;
        let worst = if r.input_err >= r.param_err {
            Some("input".to_owned())
        } else {
            r.worst_param.clone()
        };
        Ok(result(name, r.max_err(), MODEL_TOLERANCE, worst))
    }

    fn scan_check(seed: u64, skew: f64) -> Result<BlockResult> {
        let mut init = Initializer::new(seed);
        let (b, d, m, l) = (2, 3, 4, 8);
        let inputs = vec![
            init.randn(&[b, d, l], 1.0),
            init.uniform(&[b, d, l], 0.05, 0.8),
            init.uniform(&[d, m], -2.0, -0.2),
            init.randn(&[b, m, l], 1.0),
            init.randn(&[b, m, l], 1.0),
            init.randn(&[d], 1.0),
        ];
        let f = |v: &[Var<f64>]| weighted(&selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?, seed);
        let errs = if skew == 0.0 {
            gradcheck_inputs(f, &inputs, DEFAULT_STEP, None)?
        } else {
            // Negative control: compare a skewed analytic gradient of u.
            let tape = crate::tensor::Tape::new();
            let leaves: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let g = f(&leaves)?.backward()?.get_or_zeros(&leaves[0]);
            let base = f(&inputs.iter().cloned().map(Var::constant).collect::<Vec<_>>())?
                .value()
                .item();
            let mut plus = inputs.clone();
            let mut data = plus[0].to_vec();
            data[0] += DEFAULT_STEP;
            plus[0] = Tensor::from_vec(inputs[0].shape(), data)?;
            let up = f(&plus.into_iter().map(Var::constant).collect::<Vec<_>>())?
                .value()
                .item();
            vec![rel_err(g.data()[0] + skew, (up - base) / DEFAULT_STEP)]
        };
        let names = ["u", "delta", "A", "B", "C", "D"];
        let (k, err) = errs
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (k, e)| if e > acc.1 { (k, e) } else { acc });
        Ok(result(
            "selective_scan",
            err,
            BLOCK_TOLERANCE,
            Some(names[k].to_owned()),
        ))
    }

    /// Runs the check for one block. `skew` is added to every analytic
    /// gradient (0 for a genuine check).
    pub fn run_block(name: &str, seed: u64, skew: f64) -> Result<BlockResult> {
        let mut rng = Initializer::new(seed + 100);
        match name {
            "squeeze_excite" => module_check(
                name,
                build(seed, |p| SqueezeExcite::new(p, 8, 4))?,
                vec![rng.randn(&[2, 8, 3, 3], 1.0)],
                seed,
                skew,
                |m, ctx, x| m.forward(ctx, &x[0]),
            ),
            "fused_mbconv" => module_check(
                name,
                build(seed, |p| FusedMbConv::new(p, 4, 2))?,
                vec![rng.randn(&[1, 4, 4, 4], 1.0)],
                seed,
                skew,
                |m, ctx, x| m.forward(ctx, &x[0]),
            ),
            "downsample" | "downsample_maxpool" => {
                let kind = if name == "downsample" {
                    DownsamplerKind::Conv
                } else {
                    DownsamplerKind::MaxPool
                };
                module_check(
                    name,
                    build(seed, |p| Downsample::new(p, 4, 8, 2, kind))?,
                    vec![rng.randn(&[1, 4, 4, 4], 1.0)],
                    seed,
                    skew,
                    |m, ctx, x| m.forward(ctx, &x[0]),
                )
            }
            "global_token_gen" => module_check(
                name,
                build(seed, |p| GlobalTokenGen::new(p, 4, 8, 2, 2))?,
                vec![rng.randn(&[1, 4, 8, 8], 1.0)],
                seed,
                skew,
                |m, ctx, x| m.forward(ctx, &x[0]),
            ),
            "patch_stem" => module_check(
                name,
                build(seed, |p| PatchStem::new(p, 3, 4, 2))?,
                vec![rng.randn(&[1, 3, 8, 8], 1.0)],
                seed,
                skew,
                |m, ctx, x| m.forward(ctx, &x[0]),
            ),
            "mlp" => module_check(
                name,
                build(seed, |p| Ok(Mlp::new(p, 6, 12)))?,
                vec![rng.randn(&[2, 5, 6], 1.0)],
                seed,
                skew,
                |m, ctx, x| m.forward(ctx, &x[0]),
            ),
            "local_attention" => module_check(
                name,
                build(seed, |p| WindowAttention::new(p, AttentionKind::Local, 8, 2, 4))?,
                vec![rng.randn(&[2, 16, 8], 1.0)],
                seed,
                skew,
                |m, ctx, x| Ok(m.forward_local(ctx, &x[0])?.output),
            ),
            "global_attention" => module_check(
                name,
                build(seed, |p| WindowAttention::new(p, AttentionKind::Global, 8, 2, 2))?,
                vec![rng.randn(&[4, 4, 8], 1.0), rng.randn(&[2, 8, 2, 2], 1.0)],
                seed,
                skew,
                |m, ctx, x| Ok(m.forward_global(ctx, &x[0], &x[1])?.output),
            ),
            "selective_scan" => scan_check(seed, skew),
            "mamba_mixer" => module_check(
                name,
                build(seed, |p| MambaMixer::new(p, 8, 4))?,
                vec![rng.randn(&[2, 8, 8], 1.0)],
                seed,
                skew,
                |m, ctx, x| m.forward(ctx, &x[0]),
            ),
            "hybrid_layers" => module_check(
                name,
                build(seed, |p| {
                    Ok(vec![
                        HybridLayer::new(&mut p.scope(0), LayerKind::Mixer, 8, 2, 16, 4)?,
                        HybridLayer::new(&mut p.scope(1), LayerKind::Attention, 8, 2, 16, 4)?,
                    ])
                })?,
                vec![rng.randn(&[2, 6, 8], 1.0)],
                seed,
                skew,
                |m, ctx, x| {
                    let h = m[0].forward(ctx, &x[0])?;
                    m[1].forward(ctx, &h)
                },
            ),
            "toy_model" => model_check(name, "toy", seed, skew),
            "toy_hybrid_model" => model_check(name, "toy-hybrid", seed, skew),
            other => Err(Error::Usage(format!(
                "unknown block {other:?}; expected one of {}",
                BLOCKS.join(", ")
            ))),
        }
    }

    /// Checks `only` (or every block), injecting a wrong gradient into `fault`.
    pub fn run(only: Option<&str>, fault: Option<&str>, seed: u64) -> Result<Vec<BlockResult>> {
        if let Some(f) = fault {
            if !BLOCKS.contains(&f) {
                return Err(Error::Usage(format!("unknown block {f:?} for fault injection")));
            }
        }
        let names: Vec<&str> = match only {
            Some(b) if BLOCKS.contains(&b) => vec![b],
            Some(b) => {
                return Err(Error::Usage(format!(
                    "unknown block {b:?}; expected one of {}",
                    BLOCKS.join(", ")
                )))
            }
            None => BLOCKS.to_vec(),
        };
        names
            .into_iter()
            .map(|n| run_block(n, seed, if fault == Some(n) { 1e-3 } else { 0.0 }))
            .collect()
    }
}
