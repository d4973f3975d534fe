use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcformer::model::{HeadKind, MergeKind, Preset};
use tcformer::Error;

mod commands;

/// Token clustering transformer: clustering, training, evaluation,
/// visualization and model accounting.
///
/// Exit codes: 0 success, 2 input or configuration error, 3 missing
/// artifact, 4 numeric failure (divergence or failed gradient check).
#[derive(Debug, Parser)]
#[command(name = "tcformer", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation and parameter initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long, global = true, value_parser = parse_head)]
    pub head: Option<HeadKind>,
    /// Merge method between stages.
    #[arg(long, global = true, value_parser = parse_merge)]
    pub ctm: Option<MergeKind>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|_| "expected one of light, base, large".to_string())
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    s.parse().map_err(|_| "expected one of mta, deconv, cls".to_string())
}

fn parse_merge(s: &str) -> Result<MergeKind, String> {
    s.parse().map_err(|_| "expected one of dpcknn, topk, strided".to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster the rows of a CSV file with DPC-KNN.
    Cluster {
        /// CSV with one point per row (an optional header row is skipped).
        points: PathBuf,
        /// Number of clusters.
        #[arg(short = 'm', long)]
        clusters: usize,
        /// Neighbors used for the local density.
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
    /// Train on the synthetic keypoint task and write a checkpoint.
    Train,
    /// Report PCK and token density of a checkpoint on held-out data.
    Eval {
        /// Checkpoint written by `train` (defaults to <out>/model.tcf).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground-truth heatmaps instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        perfect: bool,
    },
    /// Write per-stage token-region overlays for one image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB PNG at the model's input resolution.
        #[arg(long, conflicts_with = "sample")]
        image: Option<PathBuf>,
        /// Index of a synthetic sample (generated from --seed).
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Pixel magnification of the written images.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Print per-module parameter and multiply-accumulate counts.
    Params {
        /// Square input side (defaults to 224 for presets, else the config).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Module name, or `all`.
        #[arg(default_value = "all")]
        module: String,
        /// Negative control: corrupt the analytic gradient.
        #[arg(long)]
        corrupt: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::InvalidConfig(_) | Error::Format(_) | Error::Csv(_) | Error::Image(_) => 2,
        Error::Missing(_) => 3,
        Error::Numeric(_) => 4,
        Error::Internal(_) | Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Cluster { points, clusters, k } => commands::cluster(&cli.common, &points, clusters, k),
        Command::Train => commands::train(&cli.common),
        Command::Eval { checkpoint, perfect } => commands::eval(&cli.common, checkpoint, perfect),
        Command::Visualize { checkpoint, image, sample, scale } => {
            commands::visualize(&cli.common, &checkpoint, image.as_deref(), sample, scale)
        }
        Command::Params { resolution } => commands::params(&cli.common, resolution),
        Command::Gradcheck { module, corrupt } => commands::gradcheck(&cli.common, &module, corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
