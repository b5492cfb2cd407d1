//! The `cjepa` command line: gradient checks, eigenmode dynamics, training
//! and log diagnostics as batch commands.
//!
//! Exit status is 0 on success, 1 when a computation fails (a gradient
//! mismatch, a non-finite loss, an unreadable log, an unstable step) and 2 for
//! usage errors (bad flags, invalid configuration).

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfigFile;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<cjepa_core::Error> for CliError {
    fn from(e: cjepa_core::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

pub const METRICS_COLUMNS_HELP: &str = "\
metrics.csv columns, one row per step:
  step,loss,jepa,vicreg,vicreg_sim,vicreg_std,vicreg_cov,lr,wd,ema,
  min_std,mean_std,offdiag_cov,effective_rank,collapsed
The last five are empty except on diagnostic steps (every run.diag_every
steps and the final step).";

pub const DYNAMICS_COLUMNS_HELP: &str = "\
CSV columns: time,mode,value,lambda
  single-mode runs: one mode per --lambda, value is the mode amplitude
  --coupled: value is the correlation eigenvalue of the mode, lambda its
  predictor eigenvalue";

pub const COMPARE_COLUMNS_HELP: &str = "\
comparison CSV columns: step,metric,a,b,delta (delta = a - b)";

#[derive(Debug, Parser)]
#[command(name = "cjepa", version, about = "Masked joint-embedding prediction with VICReg regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration file ([model], [masking], [vicreg], [schedules], [data], [run]).
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. --set vicreg.beta_vicreg=0 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfigFile, CliError> {
        RunConfigFile::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random instances (seeds seed..seed+trials).
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        /// Test hook: add 1e-3 to the first analytic entry of this parameter array.
        #[arg(long, value_name = "ARRAY")]
        perturb_grad: Option<String>,
    },
    /// Integrate the eigenmode dynamics of a linear predictor.
    #[command(after_help = DYNAMICS_COLUMNS_HELP)]
    Dynamics {
        /// stop-grad, no-stop-grad or no-predictor.
        #[arg(long, default_value = "stop-grad")]
        regime: String,
        /// Predictor eigenvalue of a single mode (repeatable).
        #[arg(long, num_args = 1.., conflicts_with = "coupled")]
        lambda: Vec<f64>,
        /// Evolve a random batch with the predictor rebuilt from its correlation every step.
        #[arg(long)]
        coupled: bool,
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        /// Predictor exponent for --coupled.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Initial amplitude of single modes.
        #[arg(long, default_value_t = 1.0)]
        z0: f64,
        /// Embedding dimension of the --coupled batch.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Rows of the --coupled batch.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trajectory CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the synthetic dataset and write metrics.csv, summary.json,
    /// checkpoint.bin and diagnostics.json under --out.
    #[command(after_help = METRICS_COLUMNS_HELP)]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line at every diagnostic step.
        #[arg(long)]
        progress: bool,
    },
    /// Summarize a metrics CSV, optionally against a second run.
    #[command(after_help = COMPARE_COLUMNS_HELP)]
    Diagnose {
        log: PathBuf,
        /// Second metrics CSV on the same step grid.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Write the per-step comparison CSV here (with --compare).
        #[arg(long, requires = "compare")]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gradcheck { config, seed, trials, perturb_grad } => {
            commands::gradcheck(&config.load()?, seed, trials as usize, perturb_grad.as_deref()).map(|_| ())
        }
        Command::Dynamics { regime, lambda, coupled, eta, alpha, dt, steps, z0, dim, batch, seed, out } => {
            let opts = commands::DynamicsOptions { regime, lambdas: lambda, coupled, eta, alpha, dt, steps, z0, dim, batch, seed };
            commands::dynamics(&opts, out.as_deref())
        }
        Command::Train { config, out, progress } => commands::train(&config.load()?, &out, progress).map(|_| ()),
        Command::Diagnose { log, compare, out } => commands::diagnose(&log, compare.as_deref(), out.as_deref()),
        Command::Config { config } => {
            print!("{}", config.load()?.to_toml());
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
