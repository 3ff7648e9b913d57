//! Command-line front end: `flatmin train|flatness|converge|bench|sweep`.
//!
//! Every command reads one JSON config, writes its outputs atomically into
//! `--out-dir`, and embeds the resolved config in each JSON result so the
//! run can be repeated from the result alone.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{Outputs, SWEEP_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] flatmin::Error),
}

impl CliError {
    /// 2 for bad configs and usage, 3 for numerical or protocol failures.
    pub fn exit_code(&self) -> i32 {
        use flatmin::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                E::Numerical { .. } | E::Protocol(_) | E::DegenerateDirection | E::InsufficientData { .. } => {
                    EXIT_FAILURE
                }
                _ => EXIT_USAGE,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flatmin", version, about = "Flatness-aware optimizer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one optimizer and log every step.
    Train(CommonArgs),
    /// Measure flatness and Hessian spectrum at a point.
    Flatness(CommonArgs),
    /// Train under the inverse-sqrt schedule and fit the convergence curve.
    Converge(CommonArgs),
    /// Leave-one-domain-out comparison of optimizers.
    Bench(CommonArgs),
    /// Vary one FAD parameter and record accuracy, sharpness and cost.
    Sweep(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

pub fn run(cli: &Cli) -> Result<Outputs, CliError> {
    match &cli.command {
        Command::Train(a) => commands::cmd_train(&config::load(&a.config, a.seed)?, &a.out_dir),
        Command::Flatness(a) => commands::cmd_flatness(&config::load(&a.config, a.seed)?, &a.out_dir),
        Command::Converge(a) => commands::cmd_converge(&config::load(&a.config, a.seed)?, &a.out_dir),
        Command::Bench(a) => commands::cmd_bench(&config::load(&a.config, a.seed)?, &a.out_dir),
        Command::Sweep(a) => commands::cmd_sweep(&config::load(&a.config, a.seed)?, &a.out_dir),
    }
}

/// Parse arguments, run, report, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
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
    match run(&cli) {
        Ok(out) => {
            println!("{}", out.summary);
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
