//! The `axai` command line: `train`, `eval`, `crossval`, `explain`, `perturb`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config_file, Settings};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable naming the root for per-run output directories.
pub const OUTPUT_ROOT_VAR: &str = "AXAI_OUTPUT_ROOT";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(name = "axai", version, about = "Attention CNN classifier with explainers and robustness sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a holdout split; writes checkpoint, epoch log and test metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// k-fold cross-validation with a fresh model per fold.
    Crossval(CrossvalArgs),
    /// Explain the prediction for one image.
    Explain(ExplainArgs),
    /// Accuracy under Gaussian noise and median blur.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// key=value file; flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory (default: a timestamped folder under $AXAI_OUTPUT_ROOT or ./runs).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Folder with low_risk/ and high_risk/ image subfolders.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Use N generated images instead of --data.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Generator seed for --synthetic.
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// full (the 224x224 reference network) or small (56x56, narrow).
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "CKPT")]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// all, or train/val/test of the holdout split recorded in the checkpoint.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "CKPT")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// gradcam, lime, rde or cartoonx.
    #[arg(long)]
    pub method: Option<String>,
    /// Class to explain (default: the predicted class).
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub num_features: Option<usize>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub kernel_width: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Quickshift density kernel size.
    #[arg(long)]
    pub kernel_size: Option<f64>,
    #[arg(long)]
    pub max_dist: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Noise samples per step (RDE).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Noise samples per step (CartoonX).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub wavelet: Option<String>,
    #[arg(long)]
    pub levels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "CKPT")]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Noise levels in percent, comma separated ("" for none).
    #[arg(long)]
    pub noise: Option<String>,
    /// Blur levels in percent of the image width, comma separated ("" for none).
    #[arg(long)]
    pub blur: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(out) => {
            eprintln!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("axai: {e}");
            e.code
        }
    }
}
