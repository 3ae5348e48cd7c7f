//! Acceptance run: one PASS/FAIL line per criterion, at the stated tolerances.
//!
//! A criterion listed in `KNOWN_FAILURES` is reported as FAIL and does not
//! fail the run; its analysis is in the README. Any other failure, or a known
//! failure that starts passing, exits nonzero.

use std::time::{Duration, Instant};

use gcvk::attention::{AttentionKind, WindowAttention};
use gcvk::blocks::{gtg_repeats, GlobalTokenGen};
use gcvk::flops::{self, Category};
use gcvk::gradcheck::suite;
use gcvk::io;
use gcvk::mamba::{causal_conv, selective_scan, SsmLane};
use gcvk::model::{CostReport, MixerKind, Model, ModelConfig, VARIANTS};
use gcvk::nn::{Ctx, Linear, Module, Param, ParamInit};
use gcvk::tensor::init::Initializer;
use gcvk::train::{train, Dataset, TrainOptions};
use gcvk::windowing::{window_partition, window_reverse, WindowLayout};
use gcvk::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot be met as stated.
const KNOWN_FAILURES: &[u32] = &[1];

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let dt = t.elapsed();
    o.detail = format!("{}; {:.1}s (limit {}s)", o.detail, dt.as_secs_f64(), limit.as_secs());
    o.pass &= dt < limit;
    o
}

const TARGET_PARAMS: [(&str, f64); 5] = [
    ("xxt", 12e6),
    ("xt", 20e6),
    ("tiny", 28e6),
    ("small", 51e6),
    ("base", 90e6),
];

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn criterion_1() -> Outcome {
    timed(Duration::from_secs(5), || {
        let mut stated = Vec::new();
        let mut stated_ok = true;
        let mut presets = Vec::new();
        let mut presets_ok = true;
        for (v, target) in TARGET_PARAMS {
            let preset = ModelConfig::preset(v).unwrap();
            let mut as_stated = preset.clone();
            as_stated.mlp_ratio = 3.0;
            as_stated.windows = [7, 7, 14, 7];
            let n = CostReport::analyze(&as_stated, 1).total_params as f64;
            stated_ok &= within(n, target, 0.10);
            stated.push(format!("{v} {:.2}M ({:+.1}%)", n / 1e6, (n / target - 1.0) * 100.0));
            let built = Model::<f32>::build(&preset, 0).map(|m| m.num_params() as f64);
            let n = CostReport::analyze(&preset, 1).total_params as f64;
            presets_ok &= within(n, target, 0.10) && built.is_ok_and(|b| b == n);
            presets.push(format!("{v} {:.2}M", n / 1e6));
        }
        outcome(
            stated_ok,
            format!(
                "mlp ratio 3.0 everywhere: {} [{}]; shipped presets (ratio 2.0 for small/base): {} [{}]",
                if stated_ok { "within 10%" } else { "outside 10%" },
                stated.join(", "),
                if presets_ok { "within 10%" } else { "outside 10%" },
                presets.join(", ")
            ),
        )
    })
}

fn criterion_2() -> Outcome {
    let mut ok = true;
    for v in VARIANTS {
        let cfg = ModelConfig::preset(v).unwrap();
        if cfg.mixer != MixerKind::Gcvit {
            continue;
        }
        let r = CostReport::analyze(&cfg, 1);
        for (i, s) in r.stages.iter().enumerate() {
            let (h, w, c) = (
                cfg.stage_resolution(i) as u64,
                cfg.stage_resolution(i) as u64,
                cfg.stage_dim(i) as u64,
            );
            let win = cfg.stage_window(i) as u64;
            let direct = cfg.depths[i] as u64 * 2 * h * w * (2 * c * c + win * win * c);
            ok &= s.attention_closed_form == direct;
            // The exact count drops the query projection of each global block.
            ok &= s.macs.attention == direct - s.global_blocks as u64 * h * w * c * c;
        }
    }
    let tiny = CostReport::analyze(&ModelConfig::preset("tiny").unwrap(), 1).total_macs as f64;
    let tiny_ok = within(tiny, 4.7e9, 0.15);

    let mut counter_ok = true;
    for v in ["toy", "toy-hybrid"] {
        let cfg = ModelConfig::preset(v).unwrap();
        let model: Model<f32> = Model::build(&cfg, 0).unwrap();
        let x = Var::constant(Initializer::new(1).randn(&[2, 3, 32, 32], 1.0));
        let (_, counts) = flops::count(|| model.forward(&Ctx::eval(), &x).unwrap());
        let r = CostReport::analyze(&cfg, 2);
        counter_ok &= counts.get(Category::Attention) == r.categories.attention && counts.total() == r.total_macs;
    }
    outcome(
        ok && tiny_ok && counter_ok,
        format!(
            "closed form per stage {}; tiny {:.3} GFLOPs vs 4.7 ({:+.1}%); instrumented == analytic on toys: {counter_ok}",
            if ok { "exact" } else { "MISMATCH" },
            tiny / 1e9,
            (tiny / 4.7e9 - 1.0) * 100.0
        ),
    )
}

fn criterion_3() -> Outcome {
    timed(Duration::from_secs(120), || {
        let results = suite::run(None, None, 0).unwrap();
        let worst_block = results
            .iter()
            .filter(|r| r.tolerance == suite::BLOCK_TOLERANCE)
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max);
        let worst_model = results
            .iter()
            .filter(|r| r.tolerance == suite::MODEL_TOLERANCE)
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max);
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.block.as_str()).collect();
        outcome(
            failed.is_empty(),
            format!(
                "{} checks; worst block {worst_block:.2e} (< 1e-6), worst end-to-end {worst_model:.2e} (< 1e-5){}",
                results.len(),
                if failed.is_empty() {
                    String::new()
                } else {
                    format!("; failed: {}", failed.join(", "))
                }
            ),
        )
    })
}

fn randomized<M: Module<f64>>(mut m: M, seed: u64) -> M {
    let mut init = Initializer::new(seed);
    m.visit_mut(&mut |p| {
        let t = init.randn(p.shape(), 0.4);
        p.set(t).unwrap();
    });
    m
}

fn criterion_4() -> Outcome {
    let ctx = Ctx::eval();
    // (a) batched global attention vs one window at a time.
    let mut init = Initializer::new(10);
    let global = randomized(
        WindowAttention::<f64>::new(&mut ParamInit::new(&mut init), AttentionKind::Global, 16, 2, 3).unwrap(),
        11,
    );
    let (batch, windows) = (2, 4);
    let x = Initializer::new(12).randn::<f64>(&[batch * windows, 9, 16], 1.0);
    let qg = Initializer::new(13).randn::<f64>(&[batch, 16, 3, 3], 1.0);
    let full = global
        .forward_global(&ctx, &Var::constant(x.clone()), &Var::constant(qg.clone()))
        .unwrap();
    let looped: Vec<Tensor<f64>> = (0..batch * windows)
        .map(|w| {
            let xw = Var::constant(x.narrow(0, w, 1).unwrap());
            let qw = Var::constant(qg.narrow(0, w / windows, 1).unwrap());
            global.forward_global(&ctx, &xw, &qw).unwrap().output.into_value()
        })
        .collect();
    let a_ok = full.output.value().bit_eq(&Tensor::concat(&looped, 0).unwrap());

    // (b) global attention fed the local block's own queries.
    let mut init = Initializer::new(14);
    let local = randomized(
        WindowAttention::<f64>::new(&mut ParamInit::new(&mut init), AttentionKind::Local, 16, 2, 3).unwrap(),
        15,
    );
    let mut injected = global.clone();
    let (w, b) = (local.qkv.weight.value(), local.qkv.bias.as_ref().unwrap().value());
    injected.qkv.weight.set(w.narrow(0, 16, 32).unwrap()).unwrap();
    injected
        .qkv
        .bias
        .as_mut()
        .unwrap()
        .set(b.narrow(0, 16, 32).unwrap())
        .unwrap();
    injected.proj = local.proj.clone();
    injected.bias = local.bias.clone();
    let q_proj = Linear {
        weight: Param::new("q.weight", w.narrow(0, 0, 16).unwrap()),
        bias: Some(Param::new("q.bias", b.narrow(0, 0, 16).unwrap())),
    };
    let xv = Var::constant(x.clone());
    let q = q_proj.forward(&ctx, &xv).unwrap();
    let diff = injected
        .forward_with_query(&ctx, &xv, &q)
        .unwrap()
        .output
        .value()
        .max_abs_diff(local.forward_local(&ctx, &xv).unwrap().output.value());
    let b_ok = diff < 1e-6;

    // (c) frozen selective scan vs kernel convolution.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len = rng.random_range(1..=32);
        let m = rng.random_range(1..=8);
        let a: Vec<f64> = (0..m).map(|_| -rng.random_range(0.05..4.0)).collect();
        let bv: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cv: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta = rng.random_range(0.001..1.0);
        let d = rng.random_range(-1.0..1.0);
        let u: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lane = SsmLane::frozen(a.clone(), delta, bv.clone(), cv.clone(), d, len);
        let kernel: Vec<f64> = causal_conv(&u, &lane.conv_kernel().unwrap())
            .iter()
            .zip(&u)
            .map(|(y, x)| y + d * x)
            .collect();
        let t = |v: Vec<f64>, s: &[usize]| Var::constant(Tensor::from_vec(s, v).unwrap());
        let y = selective_scan(
            &t(u.clone(), &[1, 1, len]),
            &t(vec![delta; len], &[1, 1, len]),
            &t(a, &[1, m]),
            &t((0..m).flat_map(|s| vec![bv[s]; len]).collect(), &[1, m, len]),
            &t((0..m).flat_map(|s| vec![cv[s]; len]).collect(), &[1, m, len]),
            &t(vec![d], &[1]),
        )
        .unwrap();
        for (p, q) in y.value().data().iter().zip(&kernel) {
            worst = worst.max((p - q).abs());
        }
    }
    let c_ok = worst < 1e-10;
    outcome(
        a_ok && b_ok && c_ok,
        format!(
            "(a) bitwise: {a_ok}; (b) max diff {diff:.1e} (< 1e-6); (c) 100 instances, max diff {worst:.1e} (< 1e-10)"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut window_ok = true;
    for _ in 0..1000 {
        let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let (wh, ww) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (rows, cols) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let layout = WindowLayout::new(rows * wh, cols * ww, wh, ww).unwrap();
        let x = Initializer::new(rng.random()).randn::<f64>(&[b, c, rows * wh, cols * ww], 1.0);
        let back = window_reverse(&window_partition(&Var::constant(x.clone()), &layout).unwrap(), &layout).unwrap();
        window_ok &= back.value().bit_eq(&x);
    }

    let mut init = Initializer::new(21);
    let attn: WindowAttention<f32> =
        WindowAttention::new(&mut ParamInit::new(&mut init), AttentionKind::Local, 16, 2, 7).unwrap();
    let x = Var::constant(Initializer::new(22).randn(&[4, 49, 16], 5.0));
    let weights = attn.forward_local(&Ctx::eval(), &x).unwrap().weights.into_value();
    let worst_row = weights
        .data()
        .chunks(49)
        .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let softmax_ok = worst_row < 1e-5;

    let mut gtg_ok = true;
    let mut param_ok = true;
    for v in VARIANTS {
        let cfg = ModelConfig::preset(v).unwrap();
        if cfg.mixer != MixerKind::Gcvit {
            continue;
        }
        for i in 0..4 {
            let (res, win, dim) = (cfg.stage_resolution(i), cfg.stage_window(i), cfg.stage_dim(i));
            let reps = gtg_repeats(res, win).unwrap();
            gtg_ok &= (res as f64 / win as f64).log2() == reps as f64;
            let mut init = Initializer::new(0);
            let g: GlobalTokenGen<f32> =
                GlobalTokenGen::new(&mut ParamInit::new(&mut init), dim, res, win, cfg.se_ratio).unwrap();
            let q = g
                .forward(&Ctx::eval(), &Var::constant(Tensor::zeros(&[1, dim, res, res])))
                .unwrap();
            gtg_ok &= g.repeats() == reps as usize && q.shape() == [1, dim, win, win];
            let heads = cfg.heads[i];
            let l = WindowAttention::<f32>::count(AttentionKind::Local, dim, heads, Some(win));
            let gl = WindowAttention::<f32>::count(AttentionKind::Global, dim, heads, Some(win));
            param_ok &= l - gl == dim * dim + dim;
        }
    }
    outcome(
        window_ok && softmax_ok && gtg_ok && param_ok,
        format!(
            "partition/reverse over 1000 layouts: {window_ok}; softmax row-sum error {worst_row:.1e}; \
             token generator repeats/extent: {gtg_ok}; global = local - (C^2 + C): {param_ok}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    timed(Duration::from_secs(600), || {
        pool.install(|| {
            let mut ok = true;
            let mut parts = Vec::new();
            for v in ["toy", "toy-hybrid"] {
                let cfg = ModelConfig::preset(v).unwrap();
                let data: Dataset<f32> = Dataset::two_class(256, cfg.img_size, 0);

                let mut model: Model<f32> = Model::build(&cfg, 0).unwrap();
                let short = TrainOptions {
                    steps: 50,
                    lr: 0.1,
                    batch_size: 32,
                    seed: 0,
                    eval_every: 0,
                    target_accuracy: None,
                };
                let r = train(&mut model, &data, &short).unwrap();
                let (before, after) = (r.initial().loss, r.last().loss);

                let mut model: Model<f32> = Model::build(&cfg, 0).unwrap();
                let long = TrainOptions {
                    steps: 500,
                    eval_every: 10,
                    target_accuracy: Some(0.9),
                    ..short
                };
                let reached = train(&mut model, &data, &long).unwrap().reached(0.9);
                ok &= after < before && reached.is_some();
                parts.push(format!(
                    "{v}: loss {before:.3} -> {after:.3} over 50 steps, >= 90% accuracy at step {}",
                    reached.map_or("never".to_string(), |s| s.to_string())
                ));
            }
            outcome(ok, parts.join("; "))
        })
    })
}

fn criterion_7() -> Outcome {
    let mut ok = true;
    for v in ["toy", "toy-hybrid"] {
        let cfg = ModelConfig::preset(v).unwrap();
        let x = Var::constant(Initializer::new(30).randn(&[2, 3, 32, 32], 1.0));
        let a: Model<f32> = Model::build(&cfg, 31).unwrap();
        let b: Model<f32> = Model::build(&cfg, 31).unwrap();
        let ya = a.forward(&Ctx::eval(), &x).unwrap().into_value();
        ok &= ya.bit_eq(b.forward(&Ctx::eval(), &x).unwrap().value());
        let mut c: Model<f32> = Model::build(&cfg, 32).unwrap();
        io::from_bytes(&mut c, &io::to_bytes(&a).unwrap()).unwrap();
        ok &= a
            .params()
            .iter()
            .zip(c.params())
            .all(|(p, q)| p.value().bit_eq(q.value()));
        ok &= ya.bit_eq(c.forward(&Ctx::eval(), &x).unwrap().value());
    }
    outcome(
        ok,
        "same-seed forwards and export/import round trip compared bitwise on both toys",
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        (1, "parameter-count fidelity", criterion_1),
        (2, "FLOP-model fidelity", criterion_2),
        (3, "gradient suite", criterion_3),
        (4, "oracle equivalences", criterion_4),
        (5, "structural invariants", criterion_5),
        (6, "trainability", criterion_6),
        (7, "determinism and serialization", criterion_7),
    ];
    let mut unexpected = 0;
    for (id, name, run) in criteria {
        let o = run();
        let known = KNOWN_FAILURES.contains(&id);
        let note = if !o.pass && known { " (known, see README)" } else { "" };
        println!(
            "criterion {id} {name}: {}{note} -- {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if o.pass == known {
            unexpected += 1;
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria differ from the recorded expectation");
        std::process::exit(1);
    }
}
