use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcvqe::losses::LossVariant;
use dcvqe::mask::TemporalRange;

#[derive(Debug, Parser)]
#[command(name = "dcvqe", version, about = "Train and evaluate divide-and-conquer video quality estimators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (feature files plus manifest).
    Synth(SynthArgs),
    /// Fit a model, keeping the checkpoint with the lowest validation loss.
    Train(TrainArgs),
    /// Print metrics of a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Print one score per feature file.
    Predict(PredictArgs),
    /// Finite-difference check of every parameter gradient on a tiny network.
    Gradcheck(GradcheckArgs),
    /// Write final-layer video embeddings as JSON lines.
    DumpEmbeddings(DumpArgs),
    /// Sweep one setting and print a table keyed by its values.
    Ablate(AblateArgs),
}

/// Settings shared by every subcommand; flags win over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML file with [model], [train], [split] and [synth] tables.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "DCVQE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// correlation, pwrl or l1
    #[arg(long)]
    pub loss: Option<LossVariant>,
    /// Attention radius inside a clip, or `all`.
    #[arg(long)]
    pub temporal_range: Option<TemporalRange>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    /// Defaults to the width of the dataset's feature files.
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub n_videos: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub max_bursts: Option<usize>,
    /// Also fit a ridge probe on mean-pooled features and report its test SRCC.
    #[arg(long)]
    pub probe: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Run directory for checkpoints and the loss log.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from `last.ckpt` and `best.ckpt` in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    #[arg(long, value_name = "PATH", required_unless_present = "zero_init")]
    pub checkpoint: Option<PathBuf>,
    /// Use an all-zero model built from the configuration instead.
    #[arg(long, conflicts_with = "checkpoint")]
    pub zero_init: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    /// Also write the report as JSON.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: ModelSource,
    /// Feature files to score.
    #[arg(required = true, value_name = "FILE")]
    pub files: Vec<PathBuf>,
    /// Write `path<TAB>score` lines here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, env = "DCVQE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = dcvqe::training::GRADCHECK_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = dcvqe::training::GRADCHECK_STEP)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    TemporalRange,
    AlphaBeta,
    Loss,
    Layers,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub sweep: SweepKind,
    /// Comma-separated grid overriding the default for the sweep, e.g.
    /// `3,15,all`, `1:0,0.7:0.3` or `l1,correlation`.
    #[arg(long)]
    pub values: Option<String>,
    /// Also write the rows as JSON.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}
