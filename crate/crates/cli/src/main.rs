use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gcvk::flops;
use gcvk::gradcheck::suite;
use gcvk::io;
use gcvk::model::{CostReport, MixerKind, Model, ModelConfig};
use gcvk::nn::{Ctx, Module};
use gcvk::tensor::init::Initializer;
use gcvk::train::{self, Dataset, TrainOptions};
use gcvk::{DType, Element, Error, Result, Var};

#[derive(Parser)]
#[command(name = "gcvk", version, about = "GC ViT and MambaVision reference models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage parameter and FLOP table.
    Summary {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks of every block (always f64).
    Gradcheck {
        /// Check a single block.
        #[arg(long)]
        block: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
        /// Add a wrong term to the analytic gradient of this block.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Forward-pass timing with measured and analytic FLOPs.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long)]
        json: bool,
    },
    /// SGD on the synthetic two-class image set.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long)]
        json: bool,
    },
    /// Build a model from its seed and write its weights.
    Export {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load weights into a model built from the same config and run a probe forward.
    Import {
        #[command(flatten)]
        model: ModelArgs,
        /// Weights file to read.
        path: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Preset name.
    #[arg(long, conflicts_with = "config")]
    variant: Option<String>,
    /// JSON config document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input resolution (rescales the preset windows).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    dtype: DType,
}

impl ModelArgs {
    fn config(&self, default: &str) -> Result<ModelConfig> {
        let cfg = match (&self.config, &self.variant) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                ModelConfig::from_json(&text)?
            }
            (None, Some(v)) => ModelConfig::preset(v)?,
            (None, None) => ModelConfig::preset(default)?,
        };
        match self.size {
            Some(s) if s != cfg.img_size => {
                let cfg = cfg.with_img_size(s);
                cfg.validate()?;
                Ok(cfg)
            }
            _ => Ok(cfg),
        }
    }
}

macro_rules! with_dtype {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn giga(n: u64) -> String {
    format!("{:.3}G", n as f64 / 1e9)
}

fn summary(cfg: &ModelConfig, batch: usize, as_json: bool) -> Result<()> {
    let r = CostReport::analyze(cfg, batch);
    if as_json {
        println!("{}", json!({ "config": cfg, "report": r }));
        return Ok(());
    }
    println!(
        "variant {}  img {}  batch {}  (FLOPs are multiply-accumulates)",
        r.variant, r.img_size, batch
    );
    println!(
        "{:<6} {:>5} {:>5} {:>4} {:>6} {:>14} {:>10} {:>12} {:>12}",
        "stage", "dim", "res", "win", "blocks", "local/global", "params", "attn FLOPs", "FLOPs"
    );
    println!(
        "{:<6} {:>5} {:>5} {:>4} {:>6} {:>14} {:>10} {:>12} {:>12}",
        "stem",
        cfg.base_dim,
        cfg.img_size / 2,
        "",
        "",
        "",
        millions(r.stem_params),
        "",
        giga(r.stem_macs)
    );
    for s in &r.stages {
        let split = match (&s.pattern, cfg.mixer) {
            (Some(p), MixerKind::MambaHybrid) => p.clone(),
            _ => format!("{}/{}", s.local_blocks, s.global_blocks),
        };
        let attn = if cfg.mixer == MixerKind::Gcvit {
            s.attention_closed_form
        } else {
            s.macs.attention
        };
        println!(
            "{:<6} {:>5} {:>5} {:>4} {:>6} {:>14} {:>10} {:>12} {:>12}",
            s.stage,
            s.dim,
            s.resolution,
            s.window,
            s.depth,
            split,
            millions(s.params.total),
            giga(attn),
            giga(s.macs.total)
        );
    }
    println!(
        "{:<6} {:>5} {:>5} {:>4} {:>6} {:>14} {:>10} {:>12} {:>12}",
        "head",
        cfg.stage_dim(3),
        "",
        "",
        "",
        "",
        millions(r.head_params),
        "",
        giga(r.head_macs)
    );
    println!("blocks {}", r.total_blocks());
    println!("total params {} ({})", millions(r.total_params), r.total_params);
    println!("total FLOPs {} ({})", giga(r.total_macs), r.total_macs);
    Ok(())
}

fn gradcheck(block: Option<&str>, fault: Option<&str>, seed: u64, as_json: bool) -> Result<()> {
    let results = suite::run(block, fault, seed)?;
    if as_json {
        println!("{}", json!(results));
    } else {
        for r in &results {
            println!(
                "{:<20} max rel err {:.3e}  tol {:.0e}  {}",
                r.block,
                r.max_rel_err,
                r.tolerance,
                if r.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (worst: {})", r.block, r.worst.as_deref().unwrap_or("?")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn probe_input<T: Element>(cfg: &ModelConfig, batch: usize, seed: u64) -> Var<T> {
    Var::constant(Initializer::new(seed ^ 0x1a2b).randn(&[batch, 3, cfg.img_size, cfg.img_size], 1.0))
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn bench<T: Element>(
    cfg: &ModelConfig,
    seed: u64,
    batch: usize,
    warmup: usize,
    iters: usize,
    as_json: bool,
) -> Result<()> {
    if warmup == 0 || iters < 10 || batch == 0 {
        return Err(Error::Usage(
            "bench needs --warmup >= 1, --iters >= 10 and --batch >= 1".into(),
        ));
    }
    let model: Model<T> = Model::build(cfg, seed)?;
    let x = probe_input::<T>(cfg, batch, seed);
    let ctx = Ctx::eval();
    let (out, counts) = flops::count(|| model.forward(&ctx, &x));
    let out = out?.into_value();
    for _ in 1..warmup {
        model.forward(&ctx, &x)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let y = model.forward(&ctx, &x)?;
        times.push(t.elapsed().as_secs_f64());
        if !y.value().bit_eq(&out) {
            return Err(Error::Numeric("forward pass is not deterministic".into()));
        }
    }
    times.sort_by(f64::total_cmp);
    let median = percentile(&times, 0.5);
    let p95 = percentile(&times, 0.95);
    let analytic = CostReport::analyze(cfg, batch).total_macs;
    let measured = counts.total();
    let rate = measured as f64 / median;
    if as_json {
        println!(
            "{}",
            json!({
                "variant": cfg.variant, "img_size": cfg.img_size, "batch": batch, "dtype": T::DTYPE.to_string(),
                "median_s": median, "p95_s": p95, "measured_flops": measured, "analytic_flops": analytic,
                "flops_per_s": rate, "checksum": format!("{:016x}", out.checksum()),
            })
        );
    } else {
        println!(
            "variant {}  img {}  batch {}  dtype {}  iters {iters}",
            cfg.variant,
            cfg.img_size,
            batch,
            T::DTYPE
        );
        println!("median        {:.3} ms", median * 1e3);
        println!("p95           {:.3} ms", p95 * 1e3);
        println!("measured      {measured} FLOPs");
        println!("analytic      {analytic} FLOPs");
        println!("throughput    {:.3} GFLOP/s", rate / 1e9);
        println!("checksum      {:016x}", out.checksum());
    }
    Ok(())
}

fn train_toy<T: Element>(
    cfg: &ModelConfig,
    seed: u64,
    steps: usize,
    lr: f64,
    batch: usize,
    as_json: bool,
) -> Result<()> {
    let data: Dataset<T> = Dataset::two_class(256, cfg.img_size, seed);
    let mut model: Model<T> = Model::build(cfg, seed)?;
    let opts = TrainOptions {
        steps,
        lr,
        batch_size: batch,
        seed,
        eval_every: 0,
        target_accuracy: None,
    };
    let report = train::train(&mut model, &data, &opts)?;
    let (first, last) = (report.initial(), report.last());
    if as_json {
        println!(
            "{}",
            json!({ "variant": cfg.variant, "options": opts, "report": report })
        );
    } else {
        for (i, l) in report.step_losses.iter().enumerate() {
            println!("step {:>4}  loss {l:.6}", i + 1);
        }
        println!("initial loss {:.6}  accuracy {:.3}", first.loss, first.accuracy);
        println!("final   loss {:.6}  accuracy {:.3}", last.loss, last.accuracy);
    }
    if last.loss < first.loss {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "final loss {:.6} did not decrease below initial loss {:.6}",
            last.loss, first.loss
        )))
    }
}

fn export<T: Element>(cfg: &ModelConfig, seed: u64, out: &PathBuf) -> Result<()> {
    let model: Model<T> = Model::build(cfg, seed)?;
    io::export(&model, out)?;
    let y = model.forward(&Ctx::eval(), &probe_input::<T>(cfg, 1, seed))?;
    println!(
        "wrote {} tensors ({} params) to {}",
        model.params().len(),
        model.num_params(),
        out.display()
    );
    println!("checksum {:016x}", y.value().checksum());
    Ok(())
}

fn import<T: Element>(cfg: &ModelConfig, seed: u64, path: &PathBuf) -> Result<()> {
    let mut model: Model<T> = Model::build(cfg, seed.wrapping_add(1))?;
    io::import(&mut model, path)?;
    let y = model.forward(&Ctx::eval(), &probe_input::<T>(cfg, 1, seed))?;
    println!(
        "loaded {} tensors ({} params) from {}",
        model.params().len(),
        model.num_params(),
        path.display()
    );
    println!("checksum {:016x}", y.value().checksum());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Summary { model, batch, json } => summary(&model.config("tiny")?, batch.unwrap_or(1), json),
        Command::Gradcheck {
            block,
            seed,
            json,
            inject_fault,
        } => gradcheck(block.as_deref(), inject_fault.as_deref(), seed, json),
        Command::Bench {
            model,
            batch,
            warmup,
            iters,
            json,
        } => {
            let cfg = model.config("xxt")?;
            with_dtype!(model.dtype, bench(&cfg, model.seed, batch, warmup, iters, json))
        }
        Command::TrainToy {
            model,
            steps,
            lr,
            batch,
            json,
        } => {
            let cfg = model.config("toy")?;
            with_dtype!(model.dtype, train_toy(&cfg, model.seed, steps, lr, batch, json))
        }
        Command::Export { model, out } => {
            let cfg = model.config("toy")?;
            with_dtype!(model.dtype, export(&cfg, model.seed, &out))
        }
        Command::Import { model, path } => {
            let cfg = model.config("toy")?;
            with_dtype!(model.dtype, import(&cfg, model.seed, &path))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(n) = std::env::var("GCVK_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: GCVK_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
