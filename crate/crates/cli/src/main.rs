mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::Common;

#[derive(Debug, Parser)]
#[command(name = "surgline", version, about = "Staged contrastive grounding of surgical video frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (PNG frames + frame set).
    Synth(SynthArgs),
    /// Parse annotations and sample frames into a frame set.
    Prepare(PrepareArgs),
    /// Build a video-level train/val/test split.
    Split(SplitArgs),
    /// Resample the training split to balanced class counts.
    Balance(BalanceArgs),
    /// Stage A: fine-tune on gestures from the base model.
    TrainGestures(TrainArgs),
    /// Stage B: fine-tune on phases from a Stage A checkpoint.
    TrainPhases(TrainPhasesArgs),
    /// Phase-only control run from the base model.
    TrainControl(TrainControlArgs),
    /// Linear probe on frozen image embeddings.
    Probe(ProbeArgs),
    /// Zero-shot top-k predictions for a frame set.
    Predict(PredictArgs),
    /// Metrics report and confusion matrices from a prediction dump.
    Eval(EvalArgs),
    /// Smoothed timelines, narratives and phase diagrams from a prediction dump.
    Timeline(TimelineArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Maximum number of synthetic videos.
    #[arg(long, default_value_t = 10)]
    videos: usize,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// Video list (JSON) with frame directories and annotation files.
    #[arg(long)]
    manifest: PathBuf,
    /// gesture or phase; entries of the other task are skipped.
    #[arg(long)]
    task: String,
    /// Keep every n-th source frame.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// strict or truncate (phase tables with surplus rows).
    #[arg(long, default_value = "strict")]
    row_policy: String,
    /// JSON map from phase names to class ids.
    #[arg(long)]
    phase_map: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    /// Frame set whose videos are split.
    #[arg(long, required_unless_present = "videos")]
    frames: Option<PathBuf>,
    /// Explicit comma-separated video list.
    #[arg(long, value_delimiter = ',')]
    videos: Option<Vec<String>>,
    /// Train,val,test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, conflicts_with = "counts")]
    ratios: Option<Vec<f64>>,
    /// Train,val,test video counts.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    counts: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct BalanceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// upsample, downsample or none.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, env = "SURGLINE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "SURGLINE_LR")]
    lr: Option<f64>,
    #[arg(long, env = "SURGLINE_BATCH")]
    batch: Option<usize>,
    /// upsample, downsample or none.
    #[arg(long)]
    balancing: Option<String>,
    #[arg(long)]
    unfreeze_last_k: Option<usize>,
    #[arg(long)]
    train_projections: Option<bool>,
    #[arg(long)]
    train_logit_scale: Option<bool>,
    /// last_epoch or best_val_top1.
    #[arg(long)]
    selection: Option<String>,
    /// Pretrained backbone directory; the surrogate is used without it.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainPhasesArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Stage A checkpoint.
    #[arg(long)]
    init: PathBuf,
}

#[derive(Debug, Args)]
struct TrainControlArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// 65-epoch variant instead of 15.
    #[arg(long)]
    long: bool,
}

#[derive(Debug, Clone, Args)]
struct EncoderArgs {
    /// Checkpoint written by a training command.
    #[arg(long, conflicts_with = "backbone")]
    checkpoint: Option<PathBuf>,
    /// Pretrained backbone directory.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, env = "SURGLINE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "SURGLINE_LR")]
    lr: Option<f64>,
    #[arg(long, env = "SURGLINE_BATCH")]
    batch: Option<usize>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long)]
    frames: PathBuf,
    /// Restrict to one split's videos (with --subset).
    #[arg(long)]
    split: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test", requires = "split")]
    subset: String,
    /// mean_of_texts, canonical_only or max_sim.
    #[arg(long)]
    aggregation: Option<String>,
    /// Ranks kept per frame.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preds: PathBuf,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// gesture or phase; inferred from the labels when omitted.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TimelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preds: PathBuf,
    /// Odd smoothing window in frames.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Prepare(a) => commands::prepare(a),
        Command::Split(a) => commands::split(a),
        Command::Balance(a) => commands::balance(a),
        Command::TrainGestures(a) => commands::train(a, commands::TrainKind::Gestures),
        Command::TrainPhases(a) => commands::train(a.train, commands::TrainKind::Phases(a.init)),
        Command::TrainControl(a) => commands::train(a.train, commands::TrainKind::Control { long: a.long }),
        Command::Probe(a) => commands::probe(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Timeline(a) => commands::timeline(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
