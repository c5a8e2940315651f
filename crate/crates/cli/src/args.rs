use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use egostan::model::Variant;

pub const SEED_ENV: &str = "EGOSTAN_SEED";

/// Egocentric 3D pose estimation with spatio-temporal transformers on
/// synthetic fisheye data.
#[derive(Debug, Parser)]
#[command(name = "egostan", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Train one model per seed and evaluate each final checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Assemble result tables from evaluation reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Fmt,
    Slice,
    Avg,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Fmt => Variant::Fmt,
            VariantArg::Slice => Variant::Slice,
            VariantArg::Avg => Variant::Avg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Predictor {
    /// The checkpoint's forward pass.
    Model,
    /// Echo the ground-truth pose (sanity check of the evaluation path).
    GroundTruth,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run config; its `synth` section sets the generator.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of sequences.
    #[arg(long, default_value_t = 64)]
    pub sequences: usize,
    /// Comma-separated action classes, cycled over the sequences.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub actions: Vec<String>,
    /// Frames per sequence.
    #[arg(long, default_value_t = 8)]
    pub frames_per_sequence: usize,
    /// Master seed [default: config `seeds`, else $EGOSTAN_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory [default: config `data`].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset evaluated after training [default: config `eval_data`, else the training data].
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Output directory; each seed gets a `seed_<n>` subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run config; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output token selection.
    #[arg(long, value_enum, default_value_t = VariantArg::Fmt)]
    pub variant: VariantArg,
    /// Frames per input window (T).
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// Comma-separated seeds [default: config `seeds`, else $EGOSTAN_SEED, else 0].
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long = "lr", default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Steps between checkpoints.
    #[arg(long, default_value_t = 100)]
    pub eval_interval: usize,
    /// Global gradient-norm clip [default: off].
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Only use windows whose last frame has at least this many frames of
    /// history, so runs with different T share targets; 0 means the model's T.
    #[arg(long, default_value_t = 0)]
    pub align_to: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for report.csv and report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// See `train --align-to`.
    #[arg(long, default_value_t = 0)]
    pub align_to: usize,
    #[arg(long, value_enum, default_value_t = Predictor::Model)]
    pub predictor: Predictor,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON run config; its `model` section replaces the tiny default model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Largest accepted max relative error.
    #[arg(long, default_value_t = egostan::gradsuite::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = egostan::gradsuite::DEFAULT_STEP)]
    pub step: f64,
    /// Seed of the random check points [default: config `seeds`, else $EGOSTAN_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test fixture: corrupt the backward rule of this primitive.
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Optional directory for gradcheck.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation report JSON files (repeatable).
    #[arg(long = "report", required = true)]
    pub reports: Vec<PathBuf>,
    /// Report every other report is compared against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}
