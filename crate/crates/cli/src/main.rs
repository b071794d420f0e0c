//! `compass`: train, evaluate, visualize, export and serve latent directions.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for usage and
//! configuration errors. Every command checks all of its flags and inputs
//! before it writes anything.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "compass",
    version,
    about = "Discover, inspect and serve editing directions in a generator's latent space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a deformator and reconstructor; writes checkpoint.bin, history.csv and config.json
    Train(TrainArgs),
    /// Evaluate RCA and PPL of a checkpoint; prints the report as JSON
    Eval(EvalArgs),
    /// Render a traversal grid (one row per seed, one column per magnitude) to PNG
    Traverse(TraverseArgs),
    /// Write the discovered directions, deformator weights and centroids as JSON
    ExportDirections(ExportArgs),
    /// Serve a checkpoint over HTTP for interactive editing
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training configuration (defaults are used for missing keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of optimization steps
    #[arg(long)]
    steps: Option<u64>,
    /// Override the seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Do not print progress to stderr
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Samples for each metric
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Magnitude step for PPL
    #[arg(long, default_value_t = compass_core::metrics::DEFAULT_PPL_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the report (default: eval.json next to the checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraverseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Direction to sweep (0-based)
    #[arg(long)]
    direction: usize,
    /// Magnitudes as lo:hi:n
    #[arg(long, default_value = "-6:6:7")]
    eps_range: String,
    /// Latent seeds, one grid row each
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    /// Second direction, swept from the end of the first sweep
    #[arg(long)]
    second_direction: Option<usize>,
    /// Magnitudes of the second sweep as lo:hi:n (default: same as --eps-range)
    #[arg(long)]
    second_eps_range: Option<String>,
    /// PNG file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Evaluation samples for the per-direction scores
    #[arg(long, default_value_t = 10_000)]
    rca_samples: usize,
    /// Evaluation seed for the per-direction scores
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Read the per-direction scores from an `eval` report instead
    #[arg(long)]
    report: Option<PathBuf>,
    /// Concurrent image renders
    #[arg(long, default_value_t = 2)]
    workers: usize,
    /// Maximum shifts per edit stack
    #[arg(long, default_value_t = compass_service::MAX_SHIFTS)]
    max_shifts: usize,
    /// Also serve static files (e.g. the browser frontend) from this directory
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}
