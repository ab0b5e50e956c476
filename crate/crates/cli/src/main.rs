//! `synomaly` command-line pipeline.
//!
//! Exit status: 0 on success, 2 for unknown config keys or bad values,
//! 3 for missing input files, 1 for anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{BadValue, MissingFile, RunConfig, UnknownKey};

#[derive(Parser, Debug)]
#[command(name = "synomaly", version, about = "Synthetic-anomaly diffusion pipeline for unsupervised anomaly segmentation")]
struct Cli {
    /// `key=value` configuration file, applied before any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `key=value` override; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset.
    GenPhantom(GenPhantomArgs),
    /// Train a denoiser on healthy images.
    Train(TrainArgs),
    /// Run reconstruction-based segmentation on the test split.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Rank inference settings by mean Dice.
    GridSearch(GridArgs),
    /// Write a sample noise field and its anomaly regions as PGM images.
    NoisePreview(PreviewArgs),
}

#[derive(Args, Debug)]
pub struct GenPhantomArgs {
    #[arg(long)]
    kind: Option<String>,
    /// train,test_anomalous,test_healthy
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// gaussian, coarse, simplex, pyramid or synomaly.
    #[arg(long)]
    noise: Option<String>,
    /// Synomaly size class: small, moderate, intermediate or large.
    #[arg(long)]
    preset: Option<String>,
    /// `none`, `circle` or `circle:<diameter fraction>`.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    th: Option<f32>,
    #[arg(long)]
    max_stages: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, conflicts_with = "single")]
    multi: bool,
    #[arg(long)]
    single: bool,
    #[arg(long)]
    no_masked_fusion: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory with `<id>_mask.stnsr` files (or `<id>_gt.stnsr`).
    #[arg(long)]
    pred: PathBuf,
    /// Dataset root with `manifest.csv`.
    #[arg(long)]
    gt: PathBuf,
    /// Also score healthy test images.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset whose anomalous test images serve as the validation set.
    #[arg(long)]
    data: PathBuf,
    /// `steps=150,250;kernel=5,15;th=0.2,0.3`
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    single: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
pub struct PreviewArgs {
    #[arg(long, conflicts_with_all = ["sigma", "tau"])]
    preset: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Anomaly direction, 1 or -1.
    #[arg(long, allow_hyphen_values = true)]
    d: Option<i32>,
    /// Intensity offset.
    #[arg(long)]
    i: Option<f64>,
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| BadValue { key: s.clone(), reason: "expected KEY=VALUE".into() })?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = build_config(&cli)?;
    match &cli.command {
        Command::GenPhantom(a) => commands::gen_phantom(&mut cfg, a),
        Command::Train(a) => commands::train(&mut cfg, a),
        Command::Infer(a) => commands::infer(&mut cfg, a),
        Command::Eval(a) => commands::eval(&mut cfg, a),
        Command::GridSearch(a) => commands::grid_search(&mut cfg, a),
        Command::NoisePreview(a) => commands::noise_preview(&mut cfg, a),
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UnknownKey>() || cause.is::<BadValue>() {
            return 2;
        }
        if cause.is::<MissingFile>() {
            return 3;
        }
        if let Some(synomaly::Error::Io { source, .. }) = cause.downcast_ref::<synomaly::Error>() {
            if source.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    synomaly::runtime::retain_freed_memory();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
