use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "stgnf",
    version,
    about = "Pose-based video anomaly detection with graph normalizing flows"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled pose dataset.
    Gen(GenArgs),
    /// Train a flow on pose tracks.
    Train(TrainArgs),
    /// Score pose tracks with a trained checkpoint.
    Score(ScoreArgs),
    /// Evaluate frame scores against labels.
    Eval(EvalArgs),
    /// Print a checkpoint summary.
    Inspect(InspectArgs),
}

/// Which videos to keep, judged by their frame labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    All,
    /// Videos without any anomalous frame.
    Normal,
    /// Videos with at least one anomalous frame.
    Anomalous,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON file with synthetic-data settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub persons: Option<usize>,
    #[arg(long)]
    pub anomaly_rate: Option<f64>,
    /// Keypoint noise standard deviation in pixels.
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Output directory (created; its parent must exist).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Pose tracks (JSON lines).
    #[arg(long)]
    pub tracks: PathBuf,
    /// JSON file with model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub flow_steps: Option<usize>,
    #[arg(long, value_parser = ["anatomical", "identity", "uniform"])]
    pub adjacency: Option<String>,
    /// Bone list (JSON pairs) for the anatomical adjacency.
    #[arg(long)]
    pub bones: Option<PathBuf>,
    #[arg(long, value_parser = ["unsupervised", "supervised"])]
    pub setting: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Frame labels, needed for --split.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub split: Split,
    /// Per-segment labels for the supervised setting.
    #[arg(long, conflicts_with = "regions")]
    pub segment_labels: Option<PathBuf>,
    /// Ground-truth regions from which supervised segment labels are derived.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Fraction of a segment's frames that must overlap a ground-truth region
    /// for the segment to count as abnormal.
    #[arg(long, default_value_t = 1.0)]
    pub label_min_fraction: f64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tracks: PathBuf,
    /// Frame labels; fixes each video's length and enables --split.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Gaussian smoothing of frame scores (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub smooth_sigma: f64,
    /// Gaussian noise added to normalized keypoint coordinates before scoring.
    #[arg(long, default_value_t = 0.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Frame score CSV; detections and diagnostics are written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Ground-truth regions for the region and track criteria.
    #[arg(long, requires = "detections")]
    pub regions: Option<PathBuf>,
    /// Person-frame detections written by `score`.
    #[arg(long, requires = "regions")]
    pub detections: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub split: Split,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}
