//! `lrd`: estimation runs, synthetic data, schedule costs and EvoRNN toy
//! training.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on argument errors.
//! `LRD_THREADS` sets the worker thread count.

mod estimate;
mod output;
mod schedule;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "lrd",
    version,
    about = "Long-range dependence estimation and EvoRNN toys"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate memory coefficients of a token corpus.
    Estimate(estimate::EstimateArgs),
    /// Generate synthetic series with a known memory coefficient.
    Synth(synth::SynthArgs),
    /// Print the multiply-add cost of a cell schedule.
    ScheduleCost(schedule::ScheduleCostArgs),
    /// Train an EvoRNN on the lag-recall task.
    TrainToy(train::TrainToyArgs),
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("LRD_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::usage(format!(
            "LRD_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::runtime)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Estimate(args) => estimate::run(args),
        Command::Synth(args) => synth::run(args),
        Command::ScheduleCost(args) => schedule::run(args),
        Command::TrainToy(args) => train::run(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
