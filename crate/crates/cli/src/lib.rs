//! Experiment runner: config parsing, run orchestration and CSV/SVG output.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
//! 4 numerical failure (divergence, degenerate estimates).

pub mod commands;
pub mod config;
pub mod oracle_suite;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("numerical error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<fixpool::Error> for CliError {
    fn from(e: fixpool::Error) -> Self {
        use fixpool::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Format { .. } => CliError::Io(msg),
            E::Degenerate { .. } | E::Divergence { .. } => CliError::Numeric(msg),
            _ => CliError::Config(msg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Diagnostic {
    Interpolate,
    Pools,
    Tic,
    Gap,
    Stability,
}

#[derive(Debug, Parser)]
#[command(name = "fixpool", version, about = "Episodic vs fixed-support-pool meta-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with the episodic or fixed-pool objective.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on freshly drawn episodes.
    Eval { config: PathBuf },
    /// Run one diagnostic on trained checkpoints.
    Diagnose { which: Diagnostic, config: PathBuf },
    /// Run the linear-regression oracle suites.
    Oracle { config: PathBuf },
    /// Print log10 of the number of support pools and of the per-task
    /// reduction factor.
    CountPools { n_classes: usize, per_class: usize, k_shot: usize, n_way: usize },
}

fn with_config(path: &std::path::Path, f: impl FnOnce(&Config) -> Result<(), CliError> + Send) -> Result<(), CliError> {
    let cfg = Config::load(path)?;
    let workers = cfg.workers()?;
    fixpool::exec::with_workers(workers, || f(&cfg))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => with_config(&config, commands::cmd_train),
        Command::Eval { config } => with_config(&config, commands::cmd_eval),
        Command::Diagnose { which, config } => with_config(&config, |c| commands::cmd_diagnose(c, which)),
        Command::Oracle { config } => with_config(&config, commands::cmd_oracle),
        Command::CountPools { n_classes, per_class, k_shot, n_way } => {
            let (pools, reduction) = commands::count_pools(n_classes, per_class, k_shot, n_way)?;
            println!("log10_support_pools = {pools:.1}");
            println!("log10_reduction_factor = {reduction:.1}");
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
