//! `bayeshom` command-line front-end.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "bayeshom",
    version,
    about = "Gaussian-conditioning basis functions for rough elliptic operators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output.dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, env = "BAYESHOM_THREADS", default_value_t = 0)]
    threads: usize,

    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    /// Test hook: corrupt an intermediate result.
    #[arg(long, global = true, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Compute the basis, posterior variance and Θ.
    BuildBasis,
    /// Run the invariant suites and write a JSON report.
    Verify,
    /// Run the study named in the configuration.
    Study,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Makes Θ indefinite.
    Theta,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("solver error: {0}")]
    Solver(#[from] bayeshom::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Verification(_) | Failure::Solver(bayeshom::Error::BoundViolation(_)) => 1,
            Failure::Config(_) => 2,
            Failure::Solver(_) | Failure::Io { .. } => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        log::warn!("could not configure worker pool: {e}");
    }
    let Some(path) = cli.config.as_ref() else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let ctx = match commands::Context::load(path, cli.out.clone(), cli.inject_fault) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let result = match cli.command {
        Command::BuildBasis => commands::build_basis(&ctx),
        Command::Verify => commands::verify(&ctx),
        Command::Study => commands::study(&ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
