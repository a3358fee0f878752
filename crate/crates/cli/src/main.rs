//! `ecoate` — one binary, four subcommands: `simulate` (Monte Carlo study),
//! `fed-run` (one protocol node over a shared directory), `estimate`
//! (one fused run on user tables), `report` (metrics table + SVG figure).
//!
//! Exit codes: 0 success, 1 estimation/runtime failure, 2 usage error.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ecoate_cli::config::FileConfig;
use ecoate_cli::{
    exec, CliError, EstimateArgs, FedArgs, ReportArgs, SimulateArgs, USAGE,
};

const BUILD_ID: &str = env!("ECOATE_BUILD_ID");

#[derive(Parser)]
#[command(
    name = "ecoate",
    version,
    about = "Treatment-effect estimation on a target site, borrowing strength from \
             summary statistics of tilted source sites"
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More progress detail on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the Monte Carlo study and write one CSV row per (estimator, replication).
    Simulate(SimulateArgs),
    /// Run one federated node (target or source) over a shared directory.
    FedRun(FedArgs),
    /// One estimation run on CSV site tables held locally.
    Estimate(EstimateArgs),
    /// Summarize a results CSV into a metrics table and an SVG figure.
    Report(ReportArgs),
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    eprintln!("[ecoate] build {}+{BUILD_ID}", env!("CARGO_PKG_VERSION"));
    let run = || -> Result<(), CliError> {
        let file = FileConfig::load(cli.config.as_deref())?;
        match cli.command {
            Cmd::Simulate(args) => exec::run_simulate(args, &file, cli.verbose),
            Cmd::FedRun(args) => exec::run_fed(args, &file),
            Cmd::Estimate(args) => exec::run_estimate(args, &file),
            Cmd::Report(args) => exec::run_report(args, &file),
        }
    };
    match run() {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            2
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
