//! `vib`: train VIB and baseline classifiers, then measure calibration,
//! out-of-distribution detection and error detection.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "vib", version, about = "Variational Information Bottleneck classifiers and their uncertainty signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum Command {
    /// Train a model; writes model.json, epochs.csv and manifest.json into --out
    Train(TrainArgs),
    /// Reliability bins (CSV) and accuracy/ECE summary on labeled data
    EvalCalibration(CalibrationArgs),
    /// Out-of-distribution detection metrics per (signal, OOD set)
    EvalOod(OodArgs),
    /// Detection metrics separating correct from misclassified predictions
    EvalError(ErrorArgs),
    /// Re-run the command recorded in a manifest
    Replay(ReplayArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vib,
    Baseline,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderWeightsArg {
    Affine,
    Constant,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinModeArg {
    Count,
    Width,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Model kind
    #[arg(long, value_enum, default_value = "vib")]
    pub model: ModelKind,
    /// Training images (IDX, optionally gzipped)
    #[arg(long)]
    pub train_images: PathBuf,
    /// Training labels (IDX, optionally gzipped)
    #[arg(long)]
    pub train_labels: PathBuf,
    /// Use only the first N training instances
    #[arg(long)]
    pub limit: Option<usize>,
    /// Weight of the rate term
    #[arg(long, default_value_t = 1e-3)]
    pub beta: f64,
    /// Dimension of the latent code
    #[arg(long, default_value_t = 3)]
    pub latent_dim: usize,
    /// Gaussian components in the marginal
    #[arg(long, default_value_t = 200)]
    pub marginal_components: usize,
    /// Categorical components in the decoder
    #[arg(long, default_value_t = 5)]
    pub decoder_components: usize,
    /// Whether decoder mixture weights depend on the code
    #[arg(long, value_enum, default_value = "affine")]
    pub decoder_weights: DecoderWeightsArg,
    /// Width of each hidden layer
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    /// Number of hidden layers
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Number of classes (default: largest training label + 1)
    #[arg(long)]
    pub classes: Option<usize>,
    /// Codes sampled per instance during training
    #[arg(long, default_value_t = 12)]
    pub train_samples: usize,
    /// Codes sampled per instance for dev accuracy
    #[arg(long, default_value_t = 32)]
    pub eval_samples: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Minibatch size
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Maximum number of epochs
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Fraction of the training data held out for dev-decay
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    /// Learning-rate multiplier when dev accuracy stalls
    #[arg(long, default_value_t = 0.1)]
    pub decay_factor: f64,
    /// Epochs without dev improvement before decaying
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArgs {
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// Images (IDX)
    #[arg(long)]
    pub images: PathBuf,
    /// Labels (IDX)
    #[arg(long)]
    pub labels: PathBuf,
    /// Number of reliability bins
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Equal-count or equal-width bins
    #[arg(long, value_enum, default_value = "count")]
    pub bin_mode: BinModeArg,
    /// Codes sampled per instance (VIB)
    #[arg(long, default_value_t = 32)]
    pub eval_samples: usize,
    /// Softmax temperature (baseline)
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Random seed for evaluation noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OodArgs {
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// In-distribution images (IDX)
    #[arg(long)]
    pub in_images: PathBuf,
    /// In-distribution labels (IDX; only carried into --dump-scores)
    #[arg(long)]
    pub in_labels: Option<PathBuf>,
    /// OOD sets: vflip, hflip, uniform or idx:<images>; repeat or comma-separate
    #[arg(long, required = true, value_delimiter = ',')]
    pub ood: Vec<String>,
    /// Signals among p, H, R, joint (default: all the model supports)
    #[arg(long, value_delimiter = ',')]
    pub signals: Vec<String>,
    /// Number of uniform noise images (default: size of the in-distribution set)
    #[arg(long)]
    pub uniform_count: Option<usize>,
    /// Codes sampled per instance (VIB)
    #[arg(long, default_value_t = 32)]
    pub eval_samples: usize,
    /// Softmax temperature (baseline)
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Random seed for evaluation noise and noise images
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-instance signal values to this CSV
    #[arg(long)]
    pub dump_scores: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ErrorArgs {
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// Images (IDX)
    #[arg(long)]
    pub images: PathBuf,
    /// Labels (IDX)
    #[arg(long)]
    pub labels: PathBuf,
    /// Signals among p, H, R, joint (default: all the model supports)
    #[arg(long, value_delimiter = ',')]
    pub signals: Vec<String>,
    /// Codes sampled per instance (VIB)
    #[arg(long, default_value_t = 32)]
    pub eval_samples: usize,
    /// Softmax temperature (baseline)
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Random seed for evaluation noise
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run
    #[arg(long)]
    pub manifest: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
