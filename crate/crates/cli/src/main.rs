//! `ux`: synthetic data, spectral analysis, memory pools, training,
//! evaluation and inspection from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ux_core::UxError;

#[derive(Parser)]
#[command(name = "ux", version, about = "Extreme-weather nowcasting toolkit")]
struct Cli {
    /// Upper bound on worker threads (computation is single-threaded today)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    Synth(commands::SynthArgs),
    /// Per-region high-frequency areas plus distribution summary
    AnalyzeHfa(commands::HfaArgs),
    /// Build an event-prior memory pool (same as `epa build-memory`)
    BuildMemory(commands::MemoryArgs),
    /// Fit per-variable normalization statistics
    FitStats(commands::StatsArgs),
    /// Train a model and write checkpoints plus a loss trace
    Train(commands::TrainArgs),
    /// Score a checkpoint on a dataset
    Evaluate(commands::EvalArgs),
    /// Predict the next hour for one grid
    Predict(commands::PredictArgs),
    /// Frequency-modulation tools
    Afm {
        #[command(subcommand)]
        command: AfmCommand,
    },
    /// Memory-pool tools
    Epa {
        #[command(subcommand)]
        command: EpaCommand,
    },
    /// Run the finite-difference gradient suite
    Gradcheck(commands::GradArgs),
}

#[derive(Subcommand)]
enum AfmCommand {
    /// Dump filter curves, band partition, spreads and band weights of a region
    Inspect(commands::AfmInspectArgs),
}

#[derive(Subcommand)]
enum EpaCommand {
    BuildMemory(commands::MemoryArgs),
    /// Dump pool entries and statistics
    Inspect(commands::EpaInspectArgs),
}

/// Output location shared by every writing subcommand.
#[derive(Args, Clone)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(UxError),
    Numerical(String),
}

impl From<UxError> for CliError {
    fn from(e: UxError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(UxError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(UxError::Json(e))
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(UxError::Config(_)) => 2,
            CliError::Numerical(_)
            | CliError::Core(
                UxError::TrainingDiverged { .. }
                | UxError::DegenerateSpectrum { .. }
                | UxError::DegenerateVariable { .. }
                | UxError::Domain(_),
            ) => 4,
            CliError::Core(_) => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::AnalyzeHfa(a) => commands::analyze_hfa(a),
        Command::BuildMemory(a) | Command::Epa { command: EpaCommand::BuildMemory(a) } => commands::build_memory(a),
        Command::FitStats(a) => commands::fit_stats(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Afm { command: AfmCommand::Inspect(a) } => commands::afm_inspect(a),
        Command::Epa { command: EpaCommand::Inspect(a) } => commands::epa_inspect(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ux: {}", e.message().lines().next().unwrap_or_default());
            ExitCode::from(e.code())
        }
    }
}
