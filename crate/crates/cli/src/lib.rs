//! Command-line front end: `fit` for datasets, `simulate` for Monte Carlo
//! studies. Every output file starts with `# key=value` provenance lines.

pub mod args;
pub mod config;
pub mod fit;
pub mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use pfcure_core::Error as CoreError;

use crate::args::{Cli, Command};
use crate::config::{FitConfig, SimulateConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("fit did not converge after {iterations} EM iterations; {detail} (trace in {})", trace.display())]
    NotConverged {
        iterations: usize,
        detail: String,
        trace: PathBuf,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("cannot start the thread pool: {0}")]
    Threads(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Threads(_) => EXIT_USAGE,
            CliError::NotConverged { .. } => EXIT_NOT_CONVERGED,
            CliError::Core(e) => match e.root() {
                CoreError::Config { .. } | CoreError::Schema(_) | CoreError::Io { .. } => EXIT_USAGE,
                CoreError::Csv(_) | CoreError::Parse { .. } | CoreError::Integrity(_) | CoreError::Dimension(_) => {
                    EXIT_DATA
                }
                _ => EXIT_NOT_CONVERGED,
            },
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    // a second call in the same process (tests) keeps the first logger
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn in_pool<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError>
where
    T: Send,
{
    match threads {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
        None => Ok(f()),
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fit(a) => {
            let cfg = FitConfig::resolve(a.common.config.as_deref(), a.pairs())?;
            init_logging(cfg.common.verbose);
            in_pool(cfg.common.threads, || fit::fit_command(&cfg))??;
        }
        Command::Simulate(a) => {
            let cfg = SimulateConfig::resolve(a.common.config.as_deref(), a.pairs())?;
            init_logging(cfg.common.verbose);
            in_pool(cfg.common.threads, || simulate::simulate_command(&cfg))??;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
