mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing files, I/O failures, malformed configs or datasets.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Manifest(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Manifest(_) => 4,
            CliError::Diverged(_) => 5,
        }
    }
}

#[derive(Parser)]
#[command(name = "tpuimac", version, about = "Cycle-level simulator for a hybrid systolic-array + analog crossbar accelerator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Every compute layer on the systolic array.
    Tpu,
    /// Dense layers on the crossbars.
    TpuImac,
}

impl From<ModeArg> for tpuimac::Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Tpu => tpuimac::Mode::TpuOnly,
            ModeArg::TpuImac => tpuimac::Mode::Hybrid,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one topology and write layers.csv, summary.csv and report.json.
    Simulate(SimulateArgs),
    /// Print a baseline-vs-hybrid table for several topologies.
    Compare(CompareArgs),
    /// Two-step training on MNIST, then export the weights.
    Train(TrainArgs),
    /// Write per-layer memory traces for the layers that run on the array.
    Traces(TracesArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tpu-imac")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long = "topology")]
    pub topologies: Vec<PathBuf>,
    /// Add every topology shipped with the library.
    #[arg(long)]
    pub all_bundled: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exported weight directories; each is matched to a topology by name.
    #[arg(long = "weights")]
    pub weights: Vec<PathBuf>,
    #[arg(long, requires = "test_labels")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mnist,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetArg,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, requires = "test_labels")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs_step1: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs_step2: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.25)]
    pub neuron_slope: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TracesArgs {
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tpu-imac")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Traces(a) => commands::traces(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
