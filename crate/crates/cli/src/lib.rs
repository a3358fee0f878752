//! Implementation behind the `ecoate` binary: config-file handling, site
//! CSV I/O, argument shapes, and the subcommand bodies.

pub mod config;
pub mod data;
pub mod exec;

use std::path::PathBuf;

use clap::{Args, ValueEnum};

pub const USAGE: &str = "usage: ecoate [--config FILE] [-v] <simulate|fed-run|estimate|report> ...\n\
                         run `ecoate --help` or `ecoate <command> --help` for details";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration: exit code 2.
    Usage(String),
    /// Valid request that failed while running: exit code 1.
    Run(String),
}

impl From<ecoate::error::Error> for CliError {
    fn from(e: ecoate::error::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Tilt magnitude; repeat for a grid (default: the built-in grid).
    #[arg(long = "epsilon", value_name = "EPS")]
    pub epsilon: Vec<f64>,
    /// Records per site (default 500; 2000 under --full).
    #[arg(long)]
    pub n: Option<usize>,
    /// Monte Carlo replications (default 200; 1000 under --full).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Base seed; replication r draws an independent stream from (seed, r).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (results are identical for any count).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Comma-separated estimator labels (default: the full lineup).
    #[arg(long, value_delimiter = ',', value_name = "LABELS")]
    pub estimators: Option<Vec<String>>,
    /// Enlarge every source tilt basis with redundant terms.
    #[arg(long)]
    pub overparam: bool,
    /// Fusion weighting: uniform or size.
    #[arg(long)]
    pub weighting: Option<String>,
    /// Paper-scale profile (n=2000, 1000 replications) unless overridden.
    #[arg(long)]
    pub full: bool,
    /// Output CSV path (default results.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FedRole {
    Target,
    Source,
}

#[derive(Args)]
pub struct FedArgs {
    /// Which node this process is.
    #[arg(long, value_enum)]
    pub role: FedRole,
    /// Shared run directory all nodes can reach.
    #[arg(long)]
    pub dir: PathBuf,
    /// This site's records (CSV with columns x1..xd, a, y).
    #[arg(long)]
    pub data: PathBuf,
    /// This site's id (target defaults to 0; required for sources).
    #[arg(long)]
    pub site_id: Option<u32>,
    /// Source site ids the target waits for (target role only).
    #[arg(long, value_delimiter = ',', value_name = "IDS")]
    pub expect_sources: Option<Vec<u32>>,
    /// Declared tilt basis, e.g. "a*log(y)" (source role; omit if untilted).
    #[arg(long)]
    pub xi: Option<String>,
    /// Seconds to wait for missing messages (default 60).
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Fusion weighting: uniform or size (target role).
    #[arg(long)]
    pub weighting: Option<String>,
    /// Source-failure policy: exclude or abort (target role).
    #[arg(long)]
    pub on_failure: Option<String>,
    /// Series degree override for the nuisance models (target role).
    #[arg(long)]
    pub sieve_degree: Option<usize>,
    /// Fixed kernel bandwidth for every site's centering fits (target role).
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Also write the fused report JSON here (target role).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EstimateArgs {
    /// Target site table (CSV with columns x1..xd, a, y).
    #[arg(long)]
    pub target: PathBuf,
    /// Source site table; repeat once per source.
    #[arg(long = "source", value_name = "CSV")]
    pub source: Vec<PathBuf>,
    /// Tilt basis for the matching --source (by position); "none" = untilted.
    #[arg(long = "xi", value_name = "EXPR")]
    pub xi: Vec<String>,
    /// Estimator label (default: the fused run over all given sources).
    #[arg(long)]
    pub estimator: Option<String>,
    /// Fusion weighting: uniform or size.
    #[arg(long)]
    pub weighting: Option<String>,
    /// Source-failure policy: exclude or abort.
    #[arg(long)]
    pub on_failure: Option<String>,
    /// Series degree override for the nuisance models.
    #[arg(long)]
    pub sieve_degree: Option<usize>,
    /// Fixed kernel bandwidth for the centering fits.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Results CSV produced by `simulate`.
    pub rows: PathBuf,
    /// True effect the estimators target (default 1.0).
    #[arg(long)]
    pub truth: Option<f64>,
    /// SVG output path (default: the rows path with an .svg extension).
    #[arg(long)]
    pub svg: Option<PathBuf>,
}
