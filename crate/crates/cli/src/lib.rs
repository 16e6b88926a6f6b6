//! Command-line driver: world generation, training, evaluation, report
//! comparison, alpha sweeps and gradient checks.
//!
//! Every command that writes files writes them into an output directory
//! together with `config.txt`, the fully resolved configuration.

pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{ConfigError, RunConfig};

pub const DATASET_FILE: &str = "dataset.tsv";
pub const PARAMS_FILE: &str = "params.txt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TABLE_FILE: &str = "table.txt";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const COMPARISON_FILE: &str = "comparison.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "ssl-vqa",
    version,
    about = "Train and evaluate question-answering models on synthetic biased worlds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Answering loss for the whole epoch budget.
    Baseline,
    /// Pretraining, then fine-tuning with the question-dependency term.
    Ssl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset.
    Gen {
        /// Config file; only `world.` keys matter here.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides `world.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Overrides `model.seed` and `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a parameter file and run the prior probe.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Parameter file, or a training output directory.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Column-wise difference `b - a` of two evaluation reports.
    Compare {
        /// Report file, or an evaluation output directory.
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune one shared pretrained model at several alphas.
    SweepAlpha {
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck {
        /// Every head, batch-norm and encoder combination.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs one invocation. Returns 0 on success, 2 for usage and
/// configuration errors, 1 for everything else.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            if e.downcast_ref::<ConfigError>().is_some() {
                eprintln!("error: {e}");
                2
            } else {
                eprintln!("error: {e:#}");
                1
            }
        }
    }
}
