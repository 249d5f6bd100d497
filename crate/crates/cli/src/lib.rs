//! `stylesearch`: phantom generation, downstream training, harmonization
//! and evaluation from the command line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Exit status for a bad invocation or configuration.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status for a failure while running the pipeline.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] stylesearch_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stylesearch", version, about = "Harmonization without target images by style-manifold search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed, also used as the search seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a scenario bundle.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// Train the target-domain segmenter on a bundle's training set.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
    },
    /// Search the style of the bundle's target domain.
    Harmonize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Also write the running-best PGM strip.
        #[arg(long)]
        snapshots: bool,
    },
    /// Score no harmonization, histogram matching and a found style on the
    /// bundle's travel pairs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// `best_style.json` written by `harmonize`.
        #[arg(long, value_name = "PATH")]
        style: PathBuf,
    },
    /// The whole pipeline on the default scenario, with a pass/fail summary.
    Demo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshots: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom { common }
            | Command::Train { common, .. }
            | Command::Harmonize { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Demo { common, .. } => common,
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<(), CliError> {
    match n {
        None => Ok(()),
        Some(0) => Err(CliError::Config("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}"))),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = set_threads(cli.command.common().threads).and_then(|_| commands::dispatch(&cli.command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("stylesearch: {e}");
            e.exit_code()
        }
    }
}
