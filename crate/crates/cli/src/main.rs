//! Command-line front end for the photonic sampling pipeline.
//!
//! Exit codes: 0 success, 2 config or argument errors, 3 numerical domain
//! errors, 4 capacity guards, 1 anything else (I/O, corrupt files).

mod artifacts;
mod commands;
mod config;
mod manifest;
mod samplefile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gbselm_core::Error;

#[derive(Parser)]
#[command(
    name = "gbselm",
    version,
    about = "Squeezed-light click sampling with linear readouts for image recognition"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the key = value experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Directory for artifacts and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Replace one seed, e.g. --seed-override seed.sampling=7 (repeatable).
    #[arg(long = "seed-override", value_name = "NAME=VALUE")]
    seed_override: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw click samples and persist them as a binary sample file.
    Sample(RunArgs),
    /// Select the computational-basis ordering on the training subset.
    SelectBases(RunArgs),
    /// Train the configured readout models on the frozen training subset.
    Train(RunArgs),
    /// Score trained models on the test subset, or run cross-validation.
    Evaluate(RunArgs),
    /// Re-evaluate along one hyperparameter grid from the config.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// One of: bases, features, samples, efficiency.
        #[arg(long)]
        axis: String,
    },
    /// Per-mode click frequencies of an existing sample file.
    Diagnostics {
        /// Sample file to inspect.
        #[arg(long)]
        samples: PathBuf,
        /// Directory for diagnostics.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Numerical(_) => 3,
        Error::Capacity(_) => 4,
        Error::Format(_) | Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Sample(a) => commands::cmd_sample(&a.config, &a.out, &a.seed_override),
        Cmd::SelectBases(a) => commands::cmd_select_bases(&a.config, &a.out, &a.seed_override),
        Cmd::Train(a) => commands::cmd_train(&a.config, &a.out, &a.seed_override),
        Cmd::Evaluate(a) => commands::cmd_evaluate(&a.config, &a.out, &a.seed_override),
        Cmd::Sweep { run, axis } => {
            commands::cmd_sweep(&run.config, &run.out, &run.seed_override, axis)
        }
        Cmd::Diagnostics { samples, out } => commands::cmd_diagnostics(samples, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
