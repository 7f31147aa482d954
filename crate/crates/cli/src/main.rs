mod commands;
mod manifest;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Driver action localization: synthetic data, training, evaluation.
#[derive(Parser, Debug)]
#[command(name = "stp", version, about)]
pub struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Print the learnable scalar count of the config before running.
    #[arg(long, global = true)]
    pub report_params: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    /// Config file (`key = value` lines).
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for logs, checkpoints and the final model.
        #[arg(long, short)]
        out: PathBuf,
        /// Disable a component: no_distance, no_temporal, no_fusion, no_causal_mask.
        #[arg(long)]
        ablate: Option<String>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this epoch, keeping the schedule of the full run.
        #[arg(long)]
        until_epoch: Option<usize>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Score a model, or a predictions file, against a dataset.
    Eval {
        /// Model or checkpoint file; its directory should hold `config.conf`.
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Predictions JSON to score instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Config file; defaults to `config.conf` next to the checkpoint.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory for `metrics.json` and `metrics.csv`.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write predictions for every clip of a dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Predictions JSON file.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Forward-pass latency and parameter count.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients of the full model loss.
    Gradcheck {
        /// Config file; the built-in minimal model when omitted.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STP_LOG", "info").write_style("STP_LOG_STYLE"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .context("configuring worker threads")?;
    commands::dispatch(&cli)
}
