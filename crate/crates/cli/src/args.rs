//! Command-line flags. Every flag that maps onto a config key is turned into
//! a `key = value` override that is applied after the config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mgproto", version, about = "Two-pathway RGB/pose micro-gesture classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clip dataset.
    Gen(GenArgs),
    /// Train one stage and write its run record and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Weighted average of prediction files.
    Ensemble(EnsembleArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Plots and a markdown summary for a training run.
    Report(ReportArgs),
    /// Mechanism-delta table: CE vs CE+PRM vs CE+PRM+fusion over seeds.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Well-separated class templates.
    Separable,
    /// Classes 0/1 and 2/3 differ only by a small phase offset; heavy jitter.
    Ambiguous,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory (gets manifest.txt, gen.txt and clips/).
    #[arg(long)]
    pub out: PathBuf,
    /// Key-value config file; `gen.*` keys apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "separable")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub clips_train: Option<usize>,
    #[arg(long)]
    pub clips_val: Option<usize>,
    #[arg(long)]
    pub clips_test: Option<usize>,
    #[arg(long)]
    pub intra_noise: Option<f64>,
    /// Comma-separated `class_a:class_b:offset` items.
    #[arg(long)]
    pub ambiguous_pairs: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long, required_unless_present = "replay")]
    pub data: Option<PathBuf>,
    /// Run directory for the manifest, record and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Key-value config file; `train.*` and `net.*` keys apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Re-run exactly the configuration stored in a run manifest.
    #[arg(long, conflicts_with_all = ["config", "data"])]
    pub replay: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_enum)]
    pub attention_source: Option<AttentionArg>,
    #[arg(long, value_enum)]
    pub prm_branch: Option<BranchArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable the prototypical refinement loss.
    #[arg(long)]
    pub no_prm: bool,
    /// Disable the cross-modal fusion block (joint stage only).
    #[arg(long)]
    pub no_fusion: bool,
    /// RGB pretraining checkpoint for joint initialization.
    #[arg(long, requires = "init_pose")]
    pub init_rgb: Option<PathBuf>,
    /// Pose pretraining checkpoint for joint initialization.
    #[arg(long, requires = "init_rgb")]
    pub init_pose: Option<PathBuf>,
    /// Continue from every parameter of one checkpoint.
    #[arg(long, conflicts_with_all = ["init_rgb", "init_pose"])]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Rgb,
    Pose,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Cross,
    #[value(name = "self")]
    SelfAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Rgb,
    Pose,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Prediction file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional confusion-matrix TSV (rows are true classes).
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Prediction files with identical clip ids and class counts.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// One non-negative weight per input; defaults to equal weights.
    #[arg(long, num_args = 1..)]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory; defaults to `<run>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split for the confusion matrix.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Dataset directory; defaults to the one recorded in the run manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Output directory for delta.md and delta.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Key-value config file; `gen.*`, `train.*` and `net.*` keys apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seeds, one full set of variants per seed.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Seed of the ambiguous-pairs dataset.
    #[arg(long, default_value_t = 7)]
    pub dataset_seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
}
