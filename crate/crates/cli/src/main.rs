use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use uplift_core::bench::{self, BenchSetup, Method};
use uplift_core::checkpoint::{load_model, save_model};
use uplift_core::fmap::{load_fmap, save_fmap};
use uplift_core::training::{self, held_out_images, TrainConfig};
use uplift_core::FeatureMap;

#[derive(Parser)]
#[command(name = "uplift", version, about = "Iterative feature upsampling with a local attender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant, oracle and gradient suite.
    Verify,
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "uplift.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "loss.csv")]
        trace: PathBuf,
        /// Print a progress line every N steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Compare a trained model with resize baselines on held-out images.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Training config; defaults match the model's patch and width.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Depths to evaluate; defaults to the config's training depths.
        #[arg(long, value_delimiter = ',')]
        depth: Vec<u32>,
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
    /// Time upsamplers over a sweep of token counts and write a CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "uplift,cross_attn,nearest,bilinear")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "1024,2025,4096,8100,16384")]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 16)]
        feat_channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit log-log slopes of median time against token count.
    Slopes {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Upsample one feature map with a trained model.
    Upsample {
        #[arg(long)]
        model: PathBuf,
        /// Low-resolution features (FMAP1).
        #[arg(long = "in")]
        input: PathBuf,
        /// Guidance image (FMAP1, 3 channels).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        steps: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn verify() -> Result<bool> {
    let start = Instant::now();
    let checks = uplift_core::verify::run_all(|c| {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    })?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(failed == 0)
}

fn train(config: PathBuf, checkpoint: PathBuf, trace: PathBuf, log_every: usize) -> Result<()> {
    let cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    let start = Instant::now();
    let outcome = training::train_with_progress(&cfg, |row| {
        if log_every > 0 && (row.step % log_every == 0 || row.step + 1 == cfg.steps) {
            eprintln!(
                "step {:>6}  loss {:.6}  {:.1}s",
                row.step,
                row.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    save_model(&outcome.model, &checkpoint)
        .with_context(|| format!("writing {}", checkpoint.display()))?;
    outcome
        .trace
        .save(&trace)
        .with_context(|| format!("writing {}", trace.display()))?;
    println!(
        "trained {} steps in {:.1}s; checkpoint {}, trace {}",
        cfg.steps,
        start.elapsed().as_secs_f64(),
        checkpoint.display(),
        trace.display()
    );
    Ok(())
}

fn eval(model: PathBuf, config: Option<PathBuf>, depth: Vec<u32>, images: usize) -> Result<()> {
    let model = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
    let cfg = match config {
        Some(path) => TrainConfig::load(&path).with_context(|| format!("loading {}", path.display()))?,
        None => TrainConfig {
            patch: model.config().backbone_patch,
            feat_channels: model.config().feat_channels,
            ..TrainConfig::default()
        },
    };
    if cfg.patch != model.config().backbone_patch || cfg.feat_channels != model.config().feat_channels {
        bail!("config patch/feat_channels do not match the checkpoint");
    }
    let depths = if depth.is_empty() { cfg.depths.clone() } else { depth };
    let backbone = cfg.backbone();
    let held_out = held_out_images(&cfg.data, images, cfg.gt_size())?;
    println!("depth  images  model_error  bilinear_error  nearest_error");
    for d in depths {
        let r = training::eval_upsampling(&model, &backbone, &held_out, d)?;
        println!(
            "{:>5}  {:>6}  {:>11.6}  {:>14.6}  {:>13.6}",
            r.depth, r.images, r.model_error, r.bilinear_error, r.nearest_error
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    methods: Vec<Method>,
    sizes: Vec<usize>,
    out: PathBuf,
    repeats: usize,
    warmup: usize,
    patch: usize,
    feat_channels: usize,
    seed: u64,
) -> Result<()> {
    for &t in &sizes {
        bench::token_side(t)?;
    }
    let setup = BenchSetup::slim(patch, feat_channels, seed)?;
    let result = bench::bench_sweep(&setup, &methods, &sizes, repeats, warmup, |r| {
        eprintln!(
            "{:<10} T={:<6} repeat {}  {:>10.2} ms  {:>12} bytes",
            r.method, r.tokens, r.repeat, r.ms, r.bytes
        );
    })?;
    bench::save_records(&out, &result.records).with_context(|| format!("writing {}", out.display()))?;
    for (method, tokens, digest) in &result.digests {
        println!("{method:<10} T={tokens:<6} output {digest:016x}");
    }
    Ok(())
}

fn slopes(input: PathBuf) -> Result<()> {
    let records = bench::load_records(&input).with_context(|| format!("reading {}", input.display()))?;
    let methods = bench::methods_in(&records);
    if methods.is_empty() {
        bail!("{} holds no records", input.display());
    }
    println!("{:<10}  {:>7}  {:>9}  {:>6}  {:>6}", "method", "slope", "intercept", "r2", "points");
    for m in methods {
        let fit = bench::fit_slope(&records, m)?;
        println!(
            "{:<10}  {:>7.3}  {:>9.3}  {:>6.4}  {:>6}",
            fit.method, fit.slope, fit.intercept, fit.r2, fit.points
        );
        let drops = bench::monotonicity_violations(&records, m);
        if !drops.is_empty() {
            eprintln!("warning: {m} median time decreased at T={drops:?}");
        }
    }
    Ok(())
}

fn upsample(model: PathBuf, input: PathBuf, image: PathBuf, steps: u32, out: PathBuf) -> Result<()> {
    let model = load_model(&model).with_context(|| format!("loading {}", model.display()))?;
    let feats: FeatureMap = load_fmap(&input).with_context(|| format!("reading {}", input.display()))?;
    let img: FeatureMap = load_fmap(&image).with_context(|| format!("reading {}", image.display()))?;
    let result = model.uplift_inference(&img, &feats, steps)?;
    save_fmap(&out, &result).with_context(|| format!("writing {}", out.display()))?;
    let (h, w, c) = result.shape();
    println!("wrote {h}x{w}x{c} to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify => return verify(),
        Command::Train {
            config,
            checkpoint,
            trace,
            log_every,
        } => train(config, checkpoint, trace, log_every)?,
        Command::Eval {
            model,
            config,
            depth,
            images,
        } => eval(model, config, depth, images)?,
        Command::Bench {
            methods,
            sizes,
            out,
            repeats,
            warmup,
            patch,
            feat_channels,
            seed,
        } => run_bench(methods, sizes, out, repeats, warmup, patch, feat_channels, seed)?,
        Command::Slopes { input } => slopes(input)?,
        Command::Upsample {
            model,
            input,
            image,
            steps,
            out,
        } => upsample(model, input, image, steps, out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
