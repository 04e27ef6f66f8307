//! `cpcmil`: synthetic corpora, CPC pretraining, MIL training, evaluation and self-checks.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use toml::Value;

use config::FlagValue;

/// Default parent directory for run outputs when `--out` is not given.
pub const OUTPUT_ROOT_ENV: &str = "CPCMIL_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "cpcmil", version, about = "CPC pretraining and attention MIL on image bags")]
pub struct Cli {
    /// TOML config file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Geometry and width preset: paper, desk or tiny.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Worker threads (1 keeps runs bit-reproducible).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory. Defaults to `$CPCMIL_OUTPUT_ROOT/<command>` (root `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted positive instances.
    SynthGen(SynthArgs),
    /// Segment tissue and cut instance patches into a bag manifest.
    Extract(ExtractArgs),
    /// Pretrain encoder, context network and prediction heads with InfoNCE.
    PretrainCpc(CpcArgs),
    /// Train attention MIL over cross-validation folds.
    TrainMil(TrainArgs),
    /// Frozen-mode AUC as a function of labels per class.
    SweepLabels(SweepArgs),
    /// Recompute metrics from a train-mil run.
    Eval(EvalArgs),
    /// Render attention heatmaps for the validation bags of one fold.
    AttentionMap(MapArgs),
    /// Finite-difference gradient checks on tiny fixtures.
    CheckGrads(GradArgs),
    /// Causality, gradient, closed-form loss and AUC-oracle suites.
    Verify(VerifyArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::SynthGen(_) => "synth-gen",
            Self::Extract(_) => "extract",
            Self::PretrainCpc(_) => "pretrain-cpc",
            Self::TrainMil(_) => "train-mil",
            Self::SweepLabels(_) => "sweep-labels",
            Self::Eval(_) => "eval",
            Self::AttentionMap(_) => "attention-map",
            Self::CheckGrads(_) => "check-grads",
            Self::Verify(_) => "verify",
        }
    }
}

fn push<T: Serialize>(out: &mut Vec<FlagValue>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, Value::try_from(v).expect("flag values are plain TOML values")));
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    class_balance: Option<f64>,
    #[arg(long)]
    motif_density: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    stain_jitter: Option<f64>,
    #[arg(long)]
    background_nuclei: Option<f64>,
}

impl SynthArgs {
    fn flags(&self, out: &mut Vec<FlagValue>) {
        push(out, "synthetic.seed", &self.seed);
        push(out, "synthetic.n_images", &self.n_images);
        push(out, "synthetic.image_size", &self.image_size);
        push(out, "synthetic.patch_size", &self.patch_size);
        push(out, "synthetic.class_balance", &self.class_balance);
        push(out, "synthetic.motif_density", &self.motif_density);
        push(out, "synthetic.noise_sigma", &self.noise_sigma);
        push(out, "synthetic.stain_jitter", &self.stain_jitter);
        push(out, "synthetic.background_nuclei", &self.background_nuclei);
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    /// Directory holding `labels.csv` (id,path,label) and optionally `motifs.json`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    saturation_threshold: Option<f64>,
    #[arg(long)]
    median_radius: Option<usize>,
    #[arg(long)]
    min_area: Option<usize>,
}

impl ExtractArgs {
    fn flags(&self, out: &mut Vec<FlagValue>) {
        push(out, "extract.overlap", &self.overlap);
        push(out, "segment.saturation_threshold", &self.saturation_threshold);
        push(out, "segment.median_radius", &self.median_radius);
        push(out, "segment.min_area", &self.min_area);
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CpcArgs {
    /// Bag manifest written by `extract`; every instance is a CPC tile.
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    tiles_per_epoch: Option<usize>,
    /// `dense` or `sampled:K`.
    #[arg(long)]
    negatives: Option<String>,
    #[arg(long)]
    spatial_jitter: Option<usize>,
}

impl CpcArgs {
    fn flags(&self, out: &mut Vec<FlagValue>) {
        push(out, "cpc.seed", &self.seed);
        push(out, "cpc.epochs", &self.epochs);
        push(out, "cpc.batch_size", &self.batch_size);
        push(out, "cpc.learning_rate", &self.learning_rate);
        push(out, "cpc.tiles_per_epoch", &self.tiles_per_epoch);
        push(out, "cpc.negatives", &self.negatives);
        push(out, "cpc.spatial_jitter", &self.spatial_jitter);
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MilFlags {
    /// frozen, finetune or scratch.
    #[arg(long)]
    mode: Option<String>,
    /// `r` (smooth SVM + KL on negative bags) or `ce`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_bags: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

impl MilFlags {
    fn flags(&self, out: &mut Vec<FlagValue>) {
        push(out, "mil.mode", &self.mode);
        push(out, "mil.loss", &self.loss);
        push(out, "mil.seed", &self.seed);
        push(out, "mil.learning_rate", &self.learning_rate);
        push(out, "mil.batch_bags", &self.batch_bags);
        push(out, "mil.max_epochs", &self.max_epochs);
        push(out, "mil.patience", &self.patience);
        push(out, "mil.beta", &self.beta);
        push(out, "mil.delta", &self.delta);
        push(out, "mil.tau", &self.tau);
        push(out, "mil.dropout", &self.dropout);
        push(out, "splits.folds", &self.folds);
        push(out, "splits.val_fraction", &self.val_fraction);
        push(out, "splits.seed", &self.split_seed);
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    bags: PathBuf,
    /// CPC checkpoint; required by frozen and finetune modes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    mil: MilFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated labels per class, e.g. `1,4,16,max`.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<String>>,
    #[command(flatten)]
    mil: MilFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// A train-mil run directory.
    #[arg(long)]
    run: PathBuf,
    /// Bag manifest with instance truth, for key-instance recovery.
    #[arg(long)]
    bags: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MapArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    bags: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Only this bag.
    #[arg(long)]
    bag: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &cpcmil::Error) -> u8 {
    use cpcmil::Error::*;
    match e {
        Numeric(_) => 3,
        Verification(_) => 4,
        Config(_) | Argument(_) | Undefined(_) | Format(_) | Io(_) | Image(_) | Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .parse_env("CPCMIL_LOG")
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
