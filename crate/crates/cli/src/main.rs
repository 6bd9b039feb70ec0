//! `sid`: reproducible experiments around two-phase local training.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sid", version, about = "Two-phase local training experiments")]
struct Cli {
    /// Phase-2 worker threads (defaults to the available parallelism).
    #[arg(long, global = true, env = "SID_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ideal belief cascade and its descent bound.
    Cascade(CascadeArgs),
    /// Train with the local rule or with backpropagation.
    Train(TrainArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Measure per-module costs and project multi-device speedup.
    Profile(ProfileArgs),
    /// Accuracy of both rules under symmetric label noise.
    NoiseSweep(NoiseArgs),
    /// Gradient error caused by reusing stale teachers.
    Staleness(StalenessArgs),
}

#[derive(Args, Debug)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CascadeArgs {
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    #[arg(long, default_value_t = 10)]
    pub depth: usize,
    /// Label smoothing of the target belief.
    #[arg(long = "eps-smoothing", default_value_t = 0.1)]
    pub eps_smoothing: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    Sid,
    Bp,
}

/// Values that override the config file.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// all_layers, final_layer or frozen.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub staleness_k: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "sid")]
    pub rule: Rule,
    /// Flat JSON config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 5)]
    pub hidden: usize,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Device counts to project, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub devices: Vec<usize>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(3..))]
    pub repeats: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// Label-noise rates, comma separated.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub rates: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds averaged at every rate; each offsets the data seed and sets the training seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct StalenessArgs {
    /// Staleness values, comma separated.
    #[arg(long = "k", value_delimiter = ',', default_value = "0,1,4,16")]
    pub k: Vec<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

/// How a command ended short of success.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or inputs.
    Usage(String),
    /// Ran to completion but a check did not pass, or computation failed.
    Check(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let result = match cli.command {
        Command::Cascade(a) => commands::cascade(&a),
        Command::Train(a) => commands::train(&a, workers),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Profile(a) => commands::profile(&a),
        Command::NoiseSweep(a) => commands::noise_sweep(&a, workers),
        Command::Staleness(a) => commands::staleness(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
