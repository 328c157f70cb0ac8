mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sst_core::Error;

#[derive(Parser, Debug)]
#[command(name = "sst", version, about = "Train, evaluate and benchmark hybrid state-space forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lwt.window=5` or `--set window=5`.
    /// Applied after the file, in order; the last one wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for the command's random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write history, checkpoint and a test-split report.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Time and memory of one forward+backward pass versus look-back length.
    Bench(Common),
    /// Write the configured synthetic series and its components.
    Synth(Common),
    /// Compare the reports of several runs.
    Report {
        /// Run directories (or report files).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// 2 for configuration problems, 3 for bad input data, 4 for numeric aborts.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Configuration(_) | Error::Parameter(_) | Error::Dimension(_) => 2,
        Error::Load { .. }
        | Error::Ordering { .. }
        | Error::InsufficientData { .. }
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Json(_) => 3,
        Error::NumericDomain { .. } | Error::Diverged { .. } | Error::OutOfMemory { .. } => 4,
        Error::Contract(_) | Error::UnsupportedPrimitive(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Eval { common, checkpoint } => commands::eval(&common, checkpoint),
        Command::Bench(c) => commands::bench(&c),
        Command::Synth(c) => commands::synth(&c),
        Command::Report { runs, out } => report::run(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
