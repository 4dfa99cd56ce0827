//! `epicast` command-line driver: fetch and clean case feeds, fit the model,
//! forecast, validate on a holdout, cluster latent trajectories and emit a
//! static report. Every command writes `<output_dir>/<command>.manifest.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] epicast::Error),

    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "epicast", version, about = "Forecast and cluster panels of daily case counts")]
pub struct Cli {
    /// TOML file whose keys mirror the run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download (or read) the raw case table and clean it into a panel.
    Fetch(FetchArgs),
    /// Fit the model by MCMC and store the posterior draws.
    Fit(FitArgs),
    /// Posterior-predictive forecasts from stored draws.
    Forecast(ForecastArgs),
    /// Hold out the last days, forecast them and score each horizon.
    Validate(ValidateArgs),
    /// Cluster the latent trajectories of stored draws.
    Cluster(ClusterArgs),
    /// Render a static HTML report from existing artifacts.
    Report,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Reporting day whose rows are dropped; defaults to the system date.
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub today: Option<NaiveDate>,

    /// Panel start; defaults to the earliest record.
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub start: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Read the raw table from a local file instead of the network.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["url", "offline"])]
    pub input: Option<PathBuf>,

    #[arg(long)]
    pub url: Option<String>,

    /// Use the cached feed only.
    #[arg(long)]
    pub offline: bool,

    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,

    #[command(flatten)]
    pub clean: CleanArgs,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Raw case table or cleaned panel CSV; defaults to `<output_dir>/panel.csv`.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,

    /// Drop this many trailing days before fitting.
    #[arg(long, value_name = "DAYS")]
    pub holdout: Option<usize>,

    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub adapt: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub clean: CleanArgs,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Draws directory; defaults to `<output_dir>/draws`.
    #[arg(long, value_name = "DIR")]
    pub draws: Option<PathBuf>,

    #[arg(long)]
    pub horizon: Option<usize>,

    /// Leave the outlier term out of the simulated paths.
    #[arg(long)]
    pub trend: bool,

    /// Defaults to the seed the draws were fitted with.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Full panel (raw or cleaned); defaults to `<output_dir>/panel.csv`.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,

    #[arg(long)]
    pub horizon: Option<usize>,

    /// Score draws already fitted on the truncated panel instead of refitting.
    #[arg(long, value_name = "DIR")]
    pub reuse_draws: Option<PathBuf>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[command(flatten)]
    pub clean: CleanArgs,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long, value_name = "DIR")]
    pub draws: Option<PathBuf>,

    #[arg(long)]
    pub window: Option<usize>,

    #[arg(long)]
    pub k: Option<usize>,
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
