use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

/// Segment an object through a video from a single annotated frame.
///
/// Settings come from built-in defaults, then `--config FILE`, then each
/// `--set key=value`, then the dedicated flags of a command.
#[derive(Debug, Parser)]
#[command(name = "memflow", version, propagate_version = true)]
pub struct Cli {
    /// Report errors on stderr as JSON and print results as JSON.
    #[arg(long, global = true)]
    pub json: bool,

    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Segment a frame directory from its first-frame mask.
    Propagate(PropagateArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
    /// Describe a checkpoint, a dataset, or the effective configuration.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_videos: Option<usize>,
    #[arg(long)]
    pub video_length: Option<usize>,
    /// `WxH` or a single side length.
    #[arg(long)]
    pub resolution: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with `video_####/{frames,masks}`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Receives `checkpoint.mflw` and `train_log.csv`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the temporal contrastive term.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Network size preset (`default` or `compact`).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,
    /// Mask of the annotated frame (frame 0 unless `--start-frame`).
    #[arg(long, value_name = "PNG")]
    pub mask: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Receives `masks/` and `probs/`, named like the input frames.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub memory_stride: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub start_frame: Option<usize>,
    /// Skip writing 16-bit probability maps.
    #[arg(long)]
    pub no_probabilities: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EmptyArg {
    One,
    NanSkip,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// Boundary match distance in pixels (default: 0.8% of the diagonal).
    #[arg(long)]
    pub tolerance_px: Option<f64>,
    /// Score of a frame whose prediction and ground truth are both empty.
    #[arg(long, value_enum)]
    pub empty: Option<EmptyArg>,
    /// Also write `metrics.json` and `metrics.csv` here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, value_name = "DIR")]
    pub data_dir: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long, value_name = "FILE", conflicts_with = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}
