//! Command-line surface: argument parsing, exit codes and run manifests.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 I/O or file
//! format failure, 3 numeric divergence during training.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::evaluation::ReportFormat;
use crate::volume::Dims;

pub use commands::{
    cmd_eval, cmd_predict, cmd_preprocess, cmd_synth, cmd_train, load_cohort, volume_file_name,
    EvalOutput,
};
pub use manifest::{timestamp, ManifestWriter, RunManifest, RunStatus, Versions};

/// Environment variable capping worker threads outside deterministic mode.
pub const THREADS_ENV: &str = "OSVIT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 1,
            Self::Io(_) => 2,
            Self::Divergence(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "osvit",
    version,
    about = "Survival-class prediction from brain MRI volumes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort of RVOL volumes plus metadata.csv.
    Synth(SynthArgs),
    /// Downsample and quantise volumes to model resolution.
    Preprocess(PreprocessArgs),
    /// Split a cohort by subject, train, and report metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one partition or on every sample.
    Eval(EvalArgs),
    /// Classify a single volume.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "50x64x64")]
    pub target: Dims,
    /// Spline order: 1 (linear) or 3 (cubic).
    #[arg(long, default_value_t = 3)]
    pub order: u8,
    /// Process one file at a time.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Directory of `<subject>_<sequence>.rvol` volumes.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub min_delta: f64,
    /// Fraction of training subjects held out to drive early stopping.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Fraction of subjects in the train partition.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = -100, allow_hyphen_values = true)]
    pub ignore_index: i64,
    /// Samples per forward/backward pass; only bounds memory.
    #[arg(long, default_value_t = 8)]
    pub micro_batch: usize,
    /// JSON model config; the standard architecture when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Single-threaded, bitwise reproducible run.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("selection").required(true).args(["split", "all"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub csv: PathBuf,
    /// Split manifest written by `train`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Partition of the split to score.
    #[arg(long, default_value = "test", requires = "split")]
    pub partition: String,
    /// Score every labelled sample.
    #[arg(long)]
    pub all: bool,
    #[arg(long, default_value = "text")]
    pub format: ReportFormat,
    /// Where to write the run manifest (default: next to the model).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Preprocessed `.rvol` (or `.nii`) volume.
    #[arg(long)]
    pub volume: PathBuf,
    /// Age in years.
    #[arg(long, allow_hyphen_values = true)]
    pub age: f32,
    #[arg(long, default_value = "text")]
    pub format: ReportFormat,
    /// Where to write the run manifest (default: next to the model).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

impl Command {
    fn deterministic(&self) -> bool {
        match self {
            Command::Synth(_) => true,
            Command::Preprocess(a) => a.deterministic,
            Command::Train(a) => a.deterministic,
            Command::Eval(a) => a.deterministic,
            Command::Predict(a) => a.deterministic,
        }
    }
}

/// Worker threads for a run: one when deterministic, else `OSVIT_THREADS` or all cores.
pub fn thread_count(deterministic: bool) -> Result<usize, CliError> {
    if deterministic {
        return Ok(1);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Invalid(format!(
                "{THREADS_ENV}={v} is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

/// Runs a parsed command inside a thread pool sized for it.
pub fn execute(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let threads = thread_count(cli.command.deterministic())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a, argv),
        Command::Preprocess(a) => cmd_preprocess(&a, argv, threads),
        Command::Train(a) => cmd_train(&a, argv, threads),
        Command::Eval(a) => cmd_eval(&a, argv, threads).map(|out| print!("{}", out.rendered)),
        Command::Predict(a) => cmd_predict(&a, argv, threads).map(|line| print!("{line}")),
    })
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
