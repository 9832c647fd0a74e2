// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: `calibrate`, `simulate` and `detect`.
//!
//! Exit codes are 0 on success, 2 for configuration or usage errors and 3 for
//! runtime or estimation errors.

mod commands;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_calibrate, cmd_detect, cmd_simulate, detect, fmt_num, read_observations, resolve_workers,
    simulate_report, DetectOutcome, QuantityResult, ScenarioReport, SimulationReport, WORKERS_ENV,
};
pub use config::{
    pfa_target, CalibrationSpec, ConfigDocument, MixingSpec, MonteCarloSpec, OutputSpec, PriorSpec,
    Scenario, Setup,
};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mixcpd",
    version,
    about = "Mixture Shiryaev / Shiryaev-Roberts changepoint detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute the detection threshold for a config.
    Calibrate { config: PathBuf },
    /// Run the Monte Carlo scenarios of a config and write a JSON report.
    Simulate {
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the detector over a CSV file, one observation per row.
    Detect {
        config: PathBuf,
        data: PathBuf,
        /// Restart after every alarm and report all alarm times.
        #[arg(long)]
        multicyclic: bool,
        /// Also write the per-step log statistic to trajectory.csv.
        #[arg(long)]
        trajectory: bool,
        /// Overrides `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_CONFIG;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let result = match cli.command {
        Command::Calibrate { config } => cmd_calibrate(&config, out).map(drop),
        Command::Simulate { config, out_dir } => {
            cmd_simulate(&config, out_dir.as_deref(), out).map(drop)
        }
        Command::Detect {
            config,
            data,
            multicyclic,
            trajectory,
            out_dir,
        } => cmd_detect(
            &config,
            &data,
            multicyclic,
            trajectory,
            out_dir.as_deref(),
            out,
        )
        .map(drop),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
