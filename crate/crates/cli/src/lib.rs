//! Command-line front end: generate a toy net and calibration pool, select a
//! calibration set, quantize, report and re-verify runs.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 verification failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taptq::interval_search::SearchMethod;
use taptq::toynet::SimilarityScope;

pub mod commands;
pub mod config;
pub mod run;
pub mod store;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] taptq::Error),
    #[error("verification failed with {0} violation(s)")]
    Verify(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(taptq::Error::InvalidParameter(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "taptq", version, about = "Tail-aware post-training quantization on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded toy network and calibration pool
    Gen(GenArgs),
    /// Build a calibration set from a pool
    Select(SelectArgs),
    /// Calibrate intervals, fit adapters and write a run directory
    Quantize(QuantizeArgs),
    /// Summarize one or more run directories
    Report(ReportArgs),
    /// Re-run the oracle checks on a run directory
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Pool bundle directory
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Network bundle used for stability diagnostics (raw payloads otherwise)
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Ternary,
    Exhaustive,
}

impl From<MethodArg> for SearchMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ternary => SearchMethod::Ternary,
            MethodArg::Exhaustive => SearchMethod::Exhaustive,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Local,
    Network,
}

impl From<ScopeArg> for SimilarityScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Local => SimilarityScope::Local,
            ScopeArg::Network => SimilarityScope::Network,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Network bundle directory
    #[arg(long)]
    pub net: PathBuf,
    /// Calibration bundle directory (as written by `select`)
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Weight and activation bit widths, `W,A`
    #[arg(long, value_parser = config::parse_bits)]
    pub bits: Option<(u32, u32)>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
    /// Fit adapters even where the TRE gate stays closed
    #[arg(long)]
    pub fit_always: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Md,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory; repeat to compare runs
    #[arg(long, required = true)]
    pub run: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    pub format: Format,
    /// Write to a file instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub run: PathBuf,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Select(a) => commands::select(&a),
        Command::Quantize(a) => commands::quantize(&a),
        Command::Report(a) => commands::report(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
