use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod draw;

/// Output root used when neither `--out` nor `out_dir` is given.
pub const OUT_ROOT_ENV: &str = "RGBT_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "rgbt", version, about = "Visible + infrared object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

/// Flags shared by the dataset-driven subcommands. Each one overrides the
/// matching config key.
#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    conf: Option<f64>,
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a detector.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fusion mode (early, mid, mid_p3, mid_to_late, late, score,
        /// share_weight) or a single modality (rgb, ir).
        #[arg(long)]
        fusion: Option<String>,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        preset: Option<String>,
        /// Initial weights, transferred by name.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Val {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Write per-image detections and annotated images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Graft an auxiliary branch onto a frozen single-modality detector and
    /// train it.
    FinetuneMcf {
        #[command(flatten)]
        common: Common,
        #[arg(long = "base-weights", alias = "weights")]
        base_weights: PathBuf,
        #[arg(long)]
        primary: Option<String>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Convert a single-modality checkpoint into a fused one.
    Transfer {
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "target-mode")]
        target_mode: String,
        #[arg(long, default_value = "copy_scaled")]
        strategy: String,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Save channel-mean feature maps of one backbone stage as images.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Print parameter and junction counts.
    Info {
        #[arg(long, default_value = "mid")]
        fusion: String,
        #[arg(long, default_value = "n")]
        scale: String,
        #[arg(long, default_value_t = 80)]
        classes: usize,
        #[arg(long = "ir-channels", default_value_t = 3)]
        ir_channels: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {detail}", e.category());
            ExitCode::FAILURE
        }
    }
}
