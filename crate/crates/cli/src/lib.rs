//! Command-line driver for DPANet: training, evaluation, forecasting,
//! ablation, gradient checking and synthetic data generation.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Every offending key or value, reported together.
    Validation(Vec<String>),
    Io { path: PathBuf, source: std::io::Error },
    Numerical(String),
    Core(dpanet::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Core(e) if e.is_io() => EXIT_IO,
            CliError::Core(dpanet::Error::MalformedCheckpoint(_)) => EXIT_IO,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_VALIDATION,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(errs) => {
                write!(f, "invalid configuration:")?;
                for e in errs {
                    write!(f, "\n  - {e}")?;
                }
                Ok(())
            }
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Core(dpanet::Error::Config(errs)) => {
                write!(f, "invalid configuration:")?;
                for e in errs {
                    write!(f, "\n  - {e}")?;
                }
                Ok(())
            }
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dpanet::Error> for CliError {
    fn from(e: dpanet::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "dpanet", version, about = "Dual pyramid attention forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set output.dir=DIR`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultArg {
    SoftmaxBackward,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a dataset and write checkpoint, loss history and reports.
    Train(RunArgs),
    /// Score a checkpoint on one split.
    Eval(RunArgs),
    /// Forecast the window after the last L_in rows of a CSV.
    Forecast(RunArgs),
    /// Train and score all four variants for each requested horizon.
    Ablate(RunArgs),
    /// Finite-difference check of every kernel and the tiny end-to-end model.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to these components (comma-separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Write a synthetic multi-periodic CSV.
    Synth(RunArgs),
}

fn command_with_keys() -> clap::Command {
    let listing = config::help_listing();
    Cli::command()
        .after_long_help(listing.clone())
        .mut_subcommands(|sub| sub.after_long_help(listing.clone()))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command_with_keys().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_VALIDATION;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
