//! `gsob`: simulate collinear MISO data, identify it with the four Gibbs
//! variants, check the samplers against the analytic posterior, and
//! summarize stored chains.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failures, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, paths or data (exit 2).
    Usage(String),
    /// A chain aborted or an oracle check failed (exit 1).
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<gsob_core::Error> for CliError {
    fn from(e: gsob_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "gsob", version, about = "Gibbs sampling with overlapping blocks for MISO FIR identification")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and its ground truth from the [generate] section.
    Simulate(SimulateArgs),
    /// Run the configured sampler variants on a dataset.
    Identify(IdentifyArgs),
    /// Compare the samplers with the analytic posterior at frozen hyperparameters.
    OracleCheck(OracleArgs),
    /// Recompute diagnostics for a stored chain directory.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Dataset CSV to write (overrides data.path).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ground-truth JSON to write (overrides data.truth).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct IdentifyArgs {
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output directory (overrides run.output).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Comma-separated list of GS, GSd, GSOB, GSOBd.
    #[arg(long, value_delimiter = ',')]
    pub variant: Option<Vec<String>>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Use n*p/2 as the common scale-factor shape.
    #[arg(long)]
    pub data_count_shape: bool,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long)]
    pub n_ob: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub thinning: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub emit_figures: bool,
}

#[derive(Args)]
pub struct OracleArgs {
    /// Optional config; its [data] and [model] sections select the instance.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 10_000)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.09)]
    pub sigma2: f64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, hide = true)]
    pub corrupt_mean: bool,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    /// Chain directory written by `identify`.
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Report path (default: <chain>/diagnostics.json).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Identify(a) => commands::identify(a),
        Command::OracleCheck(a) => commands::oracle_check(a),
        Command::Diagnose(a) => commands::diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
