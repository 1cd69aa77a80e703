mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::Overrides;

/// Reference-image selection, comparative inference and evaluation for
/// medical image classification with vision-language models.
#[derive(Debug, Parser)]
#[command(name = "sip", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureKind {
    /// Six task manifests with the published test-split sizes.
    Table3,
    /// Paired queries and healthy controls sharing a nuisance level.
    Nuisance,
    /// Pneumonia-style catalog with demographics, two centers and embeddings.
    Strategy,
    /// 50 noise images for end-to-end protocol runs.
    Protocol,
    /// One query with a bright planted rectangle.
    Planted,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load manifests and report per-split, per-partition counts.
    Ingest { manifests: Vec<PathBuf> },
    /// Assign reference images to every query.
    Select {
        /// Also draw a negative subset with this method (rand, cluster, spatial, coverage, all).
        #[arg(long)]
        subset: Option<String>,
        #[arg(long)]
        subset_size: Option<usize>,
    },
    /// Score every query and append decisions to the log.
    Infer {
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Build fine-tuning tuples and schedules.
    BuildSft,
    /// Metrics and bootstrap intervals for decision logs.
    Evaluate {
        /// Logs to evaluate (default: the configured mode's log).
        #[arg(long)]
        log: Vec<PathBuf>,
        /// Paired-bootstrap comparator log.
        #[arg(long)]
        comparator: Option<PathBuf>,
    },
    /// Occlusion heatmaps for selected queries.
    Attribute {
        #[arg(long, required = true)]
        query: Vec<String>,
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Run every configured strategy and tabulate metrics and agreement.
    CompareStrategies,
    /// Write a synthetic dataset and a matching config.
    Fixture {
        kind: FixtureKind,
        /// Pairs for the nuisance fixture.
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, &cli.overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
