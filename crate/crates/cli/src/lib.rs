//! Command-line front end: synthesize data, train, evaluate, run ablations,
//! check gradients and inspect gates.
//!
//! Exit status is 0 on success (and for `--help`), 2 for usage errors and 1
//! for runtime failures, which are reported as `error[category]: message`.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use camp::CampError;
use clap::{Parser, Subcommand};

use crate::config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Camp(#[from] CampError),
    #[error("{0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    GradientCheck(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Camp(e) => e.category(),
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::GradientCheck(_) => "autodiff",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "camp",
    version,
    about = "Cross-modal adaptive message passing for text-image matching"
)]
pub struct Cli {
    /// TOML file with [model], [train] and [synthetic] tables, merged over the desk defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the command's randomness (training seed; data seed for `synth`)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic benchmark as train/val/test manifests and feature files
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes stats.jsonl, best.ckpt, last.ckpt and config.toml
    Train {
        /// Directory holding train.json, val.json and test.json; synthesized when absent
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by an earlier run
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print recall@K of a checkpoint as JSON
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or manifest file; synthesized when absent
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Average over this many image folds
        #[arg(long, default_value_t = 1)]
        folds: usize,
    },
    /// Train and test ablation rows over several seeds
    Ablate {
        #[arg(long, default_value = "table4")]
        grid: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of consecutive seeds, starting at the training seed
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Rows to run (all when omitted)
        #[arg(long = "rows", value_delimiter = ',')]
        rows: Vec<String>,
        /// Directory for ablation.json
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare analytic gradients with finite differences on every operation and the model
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = camp::gradient_suite::SUITE_EPS)]
        eps: f64,
    },
    /// Print gate statistics of a split, or the breakdown of one pair
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, requires = "caption")]
        image: Option<usize>,
        #[arg(long, requires = "image")]
        caption: Option<usize>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Synth { .. } => cfg.synthetic.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(cli.command, cfg))
}
