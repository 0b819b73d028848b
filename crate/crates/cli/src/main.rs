//! `neuron-lens` command-line driver.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neuron_lens::{HeuristicKind, Objective};

#[derive(Debug, Parser)]
#[command(name = "neuron-lens", version, about = "Explain neuron activation ranges with logical formulas of concepts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split each neuron's non-zero activations into intervals with 1-D K-Means.
    Cluster(ClusterArgs),
    /// Search the best concept formula for every activation range.
    Explain(ExplainArgs),
    /// Recompute the metric suite for stored explanation records.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long, conflicts_with = "all_neurons", required_unless_present = "all_neurons")]
    neuron: Option<usize>,
    #[arg(long)]
    all_neurons: bool,
    #[arg(long, default_value_t = neuron_lens::cluster::DEFAULT_N_CLUSTERS)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
struct ExplainArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    concepts: PathBuf,
    /// Comma-separated indices and ranges (`0,2,5-9`) or `all`.
    #[arg(long, default_value = "all")]
    neurons: String,
    #[arg(long, default_value_t = neuron_lens::cluster::DEFAULT_N_CLUSTERS)]
    clusters: usize,
    #[arg(long, default_value_t = neuron_lens::search::DEFAULT_BEAM_WIDTH)]
    beam_width: usize,
    #[arg(long, default_value_t = neuron_lens::formula::DEFAULT_MAX_ARITY)]
    max_arity: usize,
    #[arg(long, default_value = "mmesh")]
    heuristic: HeuristicKind,
    #[arg(long, default_value = "iou")]
    objective: Objective,
    /// Explain the single range above this top quantile instead of clusters.
    #[arg(long)]
    legacy_quantile: Option<f64>,
    /// Directory of label-masked activation archives (`*.nlaa`).
    #[arg(long)]
    masked_activations: Option<PathBuf>,
    /// Worker threads; falls back to NEURON_LENS_THREADS, then to all cores.
    #[arg(long, env = "NEURON_LENS_THREADS")]
    threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Where to write the run manifest; defaults to `<output>.manifest.json`,
    /// or standard error without `--output`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Fill `wall_time_ms` in records (makes output run-dependent).
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// JSON Lines file of explanation records.
    #[arg(long)]
    record: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long)]
    masked_activations: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Cluster(args) => commands::cluster(args),
        Command::Explain(args) => commands::explain(args),
        Command::Metrics(args) => commands::metrics(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
