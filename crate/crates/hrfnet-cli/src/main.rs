//! `hrfnet`: one entry point for the forgery-localization pipelines.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hrfnet::memtrack::TrackingAllocator;
use hrfnet_cli::commands;
use hrfnet_cli::config::RunConfig;

// Heap tracking so `bench` can report tracked peak memory rather than
// falling back to process RSS.
#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(
    name = "hrfnet",
    version,
    about = "Forgery localization for high-resolution satellite imagery",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a spliced/copy-moved/removal forgery dataset
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Measure memory and throughput across width multipliers
    Bench(BenchArgs),
    /// Predict a probability map and mask for one image
    Predict(PredictArgs),
    /// Render an input | ground truth | prediction comparison grid
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct Common {
    /// Dotted-key config file, applied between defaults and flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice this command makes
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output artifacts
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn pairs(&self, into: &mut Vec<(String, String)>) {
        push_opt(into, "seed", &self.seed);
        push_path(into, "paths.out", &self.out);
    }
}

fn push_opt<T: ToString>(pairs: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        pairs.push((key.to_string(), v.to_string()));
    }
}

fn push_path(pairs: &mut Vec<(String, String)>, key: &str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        pairs.push((key.to_string(), v.to_string_lossy().into_owned()));
    }
}

fn push_flag(pairs: &mut Vec<(String, String)>, key: &str, set: bool) {
    if set {
        pairs.push((key.to_string(), "true".to_string()));
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of base images to tamper with
    #[arg(long)]
    bases: Option<PathBuf>,
    /// Number of forgeries to synthesize
    #[arg(long)]
    count: Option<usize>,
    /// Square output size in pixels
    #[arg(long)]
    size: Option<usize>,
    /// Synthesize this many base images into --bases first
    #[arg(long)]
    make_bases: Option<usize>,
    /// Feathering radius for blended composites
    #[arg(long)]
    feather: Option<usize>,
    /// Comma-separated candidate region sizes in pixels
    #[arg(long)]
    region_sizes: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory produced by `synth`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Square input size in pixels
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Loss weight on tampered pixels
    #[arg(long)]
    tamper_weight: Option<f64>,
    /// Channel width multiplier
    #[arg(long)]
    width_mult: Option<f64>,
    /// Square side of the downsampled deep-branch input
    #[arg(long)]
    deep_input: Option<usize>,
    /// Channels after each branch's refinement head
    #[arg(long)]
    fusion_channels: Option<usize>,
    /// Comma-separated ASPP dilation rates
    #[arg(long)]
    aspp_rates: Option<String>,
    /// Enable horizontal-flip augmentation
    #[arg(long)]
    flips: bool,
    /// Keep SRM-branch weights frozen (ablation runs)
    #[arg(long)]
    freeze_srm: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory produced by `synth`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint to evaluate
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset split: train | val | test
    #[arg(long)]
    split: Option<String>,
    /// AUC pooling: pooled | per_image_mean
    #[arg(long)]
    auc_mode: Option<String>,
    /// Binarization threshold for F1/IoU
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Square input size in pixels
    #[arg(long)]
    size: Option<usize>,
    /// Comma-separated width multipliers to benchmark
    #[arg(long)]
    widths: Option<String>,
    /// Timed forward passes per measurement (min 10)
    #[arg(long)]
    iters: Option<usize>,
    /// Untimed warm-up passes (min 3)
    #[arg(long)]
    warmup: Option<usize>,
    /// Square side of the downsampled deep-branch input
    #[arg(long)]
    deep_input: Option<usize>,
    /// Comma-separated ASPP dilation rates
    #[arg(long)]
    aspp_rates: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Image to analyze
    #[arg(long)]
    image: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Binarization threshold
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory produced by `synth`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset split: train | val | test
    #[arg(long)]
    split: Option<String>,
    /// Number of rows in the grid
    #[arg(long)]
    samples: Option<usize>,
}

fn push_size(pairs: &mut Vec<(String, String)>, size: &Option<usize>) {
    if let Some(s) = size {
        pairs.push(("data.height".to_string(), s.to_string()));
        pairs.push(("data.width".to_string(), s.to_string()));
    }
}

fn resolve(common: &Common, extra: Vec<(String, String)>) -> hrfnet::Result<RunConfig> {
    let mut pairs = Vec::new();
    common.pairs(&mut pairs);
    pairs.extend(extra);
    RunConfig::resolve(common.config.as_deref(), &pairs)
}

fn run(cli: Cli) -> hrfnet::Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => {
            let mut p = Vec::new();
            push_path(&mut p, "paths.bases", &a.bases);
            push_opt(&mut p, "synth.count", &a.count);
            push_size(&mut p, &a.size);
            push_opt(&mut p, "synth.make_bases", &a.make_bases);
            push_opt(&mut p, "synth.feather_radius", &a.feather);
            push_opt(&mut p, "synth.region_sizes", &a.region_sizes);
            commands::cmd_synth(&resolve(&a.common, p)?)
        }
        Cmd::Train(a) => {
            let mut p = Vec::new();
            push_path(&mut p, "paths.data", &a.data);
            push_size(&mut p, &a.size);
            push_opt(&mut p, "train.epochs", &a.epochs);
            push_opt(&mut p, "train.batch_size", &a.batch_size);
            push_opt(&mut p, "train.lr0", &a.lr);
            push_opt(&mut p, "train.tampered_weight", &a.tamper_weight);
            push_opt(&mut p, "model.width_multiplier", &a.width_mult);
            push_opt(&mut p, "model.deep_input", &a.deep_input);
            push_opt(&mut p, "model.fusion_channels", &a.fusion_channels);
            push_opt(&mut p, "model.aspp_rates", &a.aspp_rates);
            push_flag(&mut p, "train.augment_flips", a.flips);
            push_flag(&mut p, "train.freeze_srm", a.freeze_srm);
            commands::cmd_train(&resolve(&a.common, p)?)
        }
        Cmd::Eval(a) => {
            let mut p = Vec::new();
            push_path(&mut p, "paths.data", &a.data);
            push_path(&mut p, "paths.checkpoint", &a.checkpoint);
            push_opt(&mut p, "eval.split", &a.split);
            push_opt(&mut p, "eval.auc_mode", &a.auc_mode);
            push_opt(&mut p, "eval.threshold", &a.threshold);
            commands::cmd_eval(&resolve(&a.common, p)?)
        }
        Cmd::Bench(a) => {
            let mut p = Vec::new();
            push_size(&mut p, &a.size);
            push_opt(&mut p, "bench.widths", &a.widths);
            push_opt(&mut p, "bench.iters", &a.iters);
            push_opt(&mut p, "bench.warmup", &a.warmup);
            push_opt(&mut p, "model.deep_input", &a.deep_input);
            push_opt(&mut p, "model.aspp_rates", &a.aspp_rates);
            commands::cmd_bench(&resolve(&a.common, p)?)
        }
        Cmd::Predict(a) => {
            let mut p = Vec::new();
            push_path(&mut p, "paths.image", &a.image);
            push_path(&mut p, "paths.checkpoint", &a.checkpoint);
            push_opt(&mut p, "eval.threshold", &a.threshold);
            commands::cmd_predict(&resolve(&a.common, p)?)
        }
        Cmd::Visualize(a) => {
            let mut p = Vec::new();
            push_path(&mut p, "paths.data", &a.data);
            push_path(&mut p, "paths.checkpoint", &a.checkpoint);
            push_opt(&mut p, "eval.split", &a.split);
            push_opt(&mut p, "eval.samples", &a.samples);
            commands::cmd_visualize(&resolve(&a.common, p)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
