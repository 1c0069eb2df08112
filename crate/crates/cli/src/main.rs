//! `demandctl`: generate → impute → train → predict-grid → evaluate, plus
//! the training-size and staleness experiments.
//!
//! Failures print a single line `error kind=<kind> message=<json string>` to
//! stderr and exit nonzero.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{one_line, Overrides, RunConfig};
use stages::{Stage, StageOrder};

#[derive(Parser)]
#[command(name = "demandctl", version, about = "Price-conditional demand forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(short = 'c', long = "config")]
    config: PathBuf,
    /// Seed for the catalog, model initialisation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for all artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Naive,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a catalog and write panel files.
    Generate(Common),
    /// Infer demand from censored sales.
    Impute(Common),
    /// Train the model and write a checkpoint.
    Train(Common),
    /// Write the article × market × week × discount demand grid.
    PredictGrid {
        #[command(flatten)]
        common: Common,
        /// Comma-separated discount axis, e.g. `0,0.35,0.7`.
        #[arg(long, value_delimiter = ',')]
        discounts: Option<Vec<f64>>,
    },
    /// Backtest the model and write metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also score a baseline forecaster.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Error against training-set size.
    Scaling(Common),
    /// Error of a stale model against weekly retraining.
    Staleness(Common),
}

fn kind(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<StageOrder>().is_some() {
        return ("stage-order", 3);
    }
    use demandcast::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_)) => ("config", 2),
        Some(E::Schema(_)) => ("schema", 2),
        Some(E::Io { .. }) => ("io", 4),
        Some(E::Parse { .. }) => ("parse", 4),
        Some(E::Diverged { .. }) | Some(E::NonFinite(_)) | Some(E::NanGradient(_)) => ("diverged", 5),
        Some(E::Data(_)) | Some(E::NoFullAvailability { .. }) | Some(E::AllMasked { .. }) => ("data", 1),
        Some(E::UndefinedMetric(_)) => ("metric", 1),
        Some(_) => ("internal", 1),
        None => ("internal", 1),
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message before them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let (common, discounts, baseline) = match &cli.command {
        Command::Generate(c) | Command::Impute(c) | Command::Train(c) | Command::Scaling(c) | Command::Staleness(c) => {
            (c, None, None)
        }
        Command::PredictGrid { common, discounts } => (common, discounts.clone(), None),
        Command::Evaluate { common, baseline } => (common, None, *baseline),
    };
    let overrides = Overrides {
        seed: common.seed,
        workers: common.workers,
        out_dir: common.out_dir.clone(),
        discounts,
    };
    let cfg = RunConfig::load(&common.config, &overrides)?;
    let stage = Stage {
        cfg: &cfg,
        config_path: &common.config,
    };
    match cli.command {
        Command::Generate(_) => stage.generate(),
        Command::Impute(_) => stage.impute(),
        Command::Train(_) => stage.train(),
        Command::PredictGrid { .. } => stage.predict_grid(),
        Command::Evaluate { .. } => stage.evaluate(matches!(baseline, Some(Baseline::Naive))),
        Command::Scaling(_) => stage.scaling(),
        Command::Staleness(_) => stage.staleness(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (kind, code) = kind(&err);
            let message = serde_json::to_string(&one_line(&describe(&err))).expect("string serialises");
            eprintln!("error kind={kind} message={message}");
            ExitCode::from(code)
        }
    }
}
