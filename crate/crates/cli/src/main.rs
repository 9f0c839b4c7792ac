//! `ccl`: synthetic data generation, training, evaluation, gradient checks
//! and ablation sweeps.
//!
//! Exit codes: 0 on success, 1 when the input is invalid (arguments,
//! configuration, files), 2 when a run fails (non-finite loss, failed
//! gradient check, I/O while writing outputs).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod record;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DataSource, TrainOverrides};

#[derive(Parser, Debug)]
#[command(name = "ccl", version, about = "Compositional contrastive distillation over embedding tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Train a student and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Score a checkpoint: test top-1 and test→train kNN recall.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random cases.
    Gradcheck(GradcheckArgs),
    /// Train every variant × modality mode × seed cell and summarize.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Named preset: ucf51-gap, aligned or unaligned.
    #[arg(long, default_value = "ucf51-gap", conflicts_with = "config")]
    pub preset: String,
    /// TOML file with generator settings; unset keys take the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataSource,
    /// TOML training configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation variant applied to the loss configuration.
    #[arg(long)]
    pub variant: Option<ccl::ablation::Variant>,
    /// Teacher modalities: A, I or AI.
    #[arg(long)]
    pub mode: Option<ccl::ablation::Mode>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory or `checkpoint.toml`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = ccl::eval::DEFAULT_KS)]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Number of random cases.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 1e-4, allow_hyphen_values = true)]
    pub tol: f64,
    /// Also write per-case records here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Defaults to the ucf51-gap preset, regenerated per seed.
    #[command(flatten)]
    pub data: DataSource,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, value_delimiter = ',', default_value = "A,I,AI")]
    pub modes: Vec<ccl::ablation::Mode>,
    /// Comma-separated variant names, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub variants: Vec<String>,
    /// Number of seeds per cell.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, env = "CCL_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Why a command stopped, and which exit code that maps to.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<ccl::Error> for Failure {
    fn from(e: ccl::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

pub fn invalid(msg: impl Display) -> Failure {
    Failure::Validation(anyhow::anyhow!("{msg}"))
}

pub fn runtime(msg: impl Display) -> Failure {
    Failure::Runtime(anyhow::anyhow!("{msg}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version go to stdout and are not errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
        Command::Ablate(args) => commands::ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (kind, err) = match &failure {
                Failure::Validation(e) => ("invalid input", e),
                Failure::Runtime(e) => ("run failed", e),
            };
            eprintln!("ccl: {kind}: {err:#}");
            ExitCode::from(failure.exit_code())
        }
    }
}
