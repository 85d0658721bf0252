//! `crfrnn`: refine segmentation unaries with a dense CRF, train its
//! parameters, and check the engine against its brute-force oracle.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crfrnn_core::CrfError;

#[derive(Debug, Parser)]
#[command(
    name = "crfrnn",
    version,
    about = "Dense-CRF mean-field refinement and training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Refine unaries for one image and write the label map.
    Infer(InferArgs),
    /// Train kernel weights and label compatibilities on a dataset.
    Train(TrainArgs),
    /// Compare analytic gradients with finite differences on a random instance.
    Gradcheck(GradcheckArgs),
    /// Time each mean-field stage, or the filter across image sizes.
    Bench(BenchArgs),
    /// Compare the fast filter and inference with the brute-force oracle.
    Compare(CompareArgs),
    /// Write a synthetic dataset with a manifest and a config.
    Synth(SynthArgs),
    /// Score Potts-initialized inference over a grid of kernel weights.
    Gridsearch(GridsearchArgs),
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    unary: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
    #[arg(long)]
    out_marginals: Option<PathBuf>,
    /// Image with the label map blended in (PNG or PPM by extension).
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Mean-field iterations; defaults to t_infer from the config.
    #[arg(short = 'T', long = "iterations")]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_params: PathBuf,
    /// Per-epoch loss and mean IU as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Overrides epochs from the config.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "6x6", value_parser = parse_size)]
    size: (usize, usize),
    /// Defaults to the config's label count.
    #[arg(long)]
    labels: Option<usize>,
    /// Checks every T from 1 up to this.
    #[arg(short = 'T', long = "iterations", default_value_t = 2)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    unary: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    #[arg(short = 'T', long = "iterations")]
    iterations: Option<usize>,
    /// Time the filter on random square images instead.
    #[arg(long)]
    scaling: bool,
    /// Side lengths for --scaling.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    sides: Vec<usize>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "8x8", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mean-field iterations compared; one is the calibrated setting.
    #[arg(short = 'T', long = "iterations", default_value_t = 1)]
    iterations: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value = "48x48", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    labels: usize,
}

#[derive(Debug, Args)]
struct GridsearchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Candidate weights for one kernel, comma-separated; give once per
    /// kernel in config order.
    #[arg(long, required = true)]
    grid: Vec<String>,
    #[arg(short = 'T', long = "iterations")]
    iterations: Option<usize>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("bad size component {v:?}"))
    };
    Ok((parse(h)?, parse(w)?))
}

/// Why a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, files or values: exit 1.
    Input(String),
    /// A numerical check did not pass: exit 2.
    Check(String),
}

impl From<CrfError> for Failure {
    fn from(e: CrfError) -> Self {
        match e {
            CrfError::NonFinite(_) | CrfError::StaleCache(_) => Failure::Check(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Infer(a) => commands::infer(a),
        Command::Train(a) => commands::train(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
        Command::Compare(a) => commands::compare(a),
        Command::Synth(a) => commands::synth(a),
        Command::Gridsearch(a) => commands::gridsearch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}
