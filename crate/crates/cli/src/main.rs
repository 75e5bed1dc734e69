//! `ppdn`: train, evaluate and inspect push-pull denoisers.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 dataset error,
//! 4 diverged training, 5 bad checkpoint.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ppdn", version, about = "Self-supervised push-pull image denoising")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; a time-derived seed is used and logged when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical processors). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Config override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Raise log verbosity (overrides PPDN_LOG).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a denoiser on a directory of clean PNGs.
    Train(TrainArgs),
    /// Denoise one PNG.
    Denoise(DenoiseArgs),
    /// Corrupt, denoise and score every PNG in a directory.
    Eval(EvalArgs),
    /// Monte-Carlo checks of the risk decompositions.
    VerifyTheory(VerifyArgs),
    /// Write shifted and JPEG-decayed copies of a PNG.
    DegradePreview(PreviewArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of clean training PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Final checkpoint path; periodic checkpoints and the state file sit beside it.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint and its `.state` file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step telemetry CSV (default: `<out>.telemetry.csv`).
    #[arg(long)]
    telemetry: Option<PathBuf>,
    /// Start from the small desk-scale preset instead of the full-scale defaults.
    #[arg(long)]
    desk: bool,
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Apply the network twice.
    #[arg(long)]
    two_pass: bool,
    /// Add Gaussian noise of this level (8-bit units) before denoising.
    #[arg(long, value_name = "SIGMA")]
    add_noise: Option<f64>,
    /// Also write the noisy input here when --add-noise is used.
    #[arg(long)]
    noisy_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of clean test PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Gaussian noise level in 8-bit units; overrides the configured noise.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value = "metrics.csv")]
    csv: PathBuf,
    #[arg(long, default_value = "metrics.json")]
    json: PathBuf,
    #[arg(long)]
    two_pass: bool,
    /// `channel-mean` or `luma`.
    #[arg(long, default_value = "channel-mean")]
    ssim_mode: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TheoryMethod {
    N2n,
    Nr2n,
    R2r,
    Pushpull,
    Constant,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    method: TheoryMethod,
    /// Directory of clean PNGs the patches are cut from.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Patch side; 8 for the decompositions, 40 for `constant`.
    #[arg(long)]
    patch: Option<usize>,
    /// Noise levels in 8-bit units.
    #[arg(long, default_value_t = 50.0)]
    sigma1: f64,
    /// N2N target noise; defaults to sigma1 / 2.
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, default_value_t = 25.0)]
    sigma_prime: f64,
    #[arg(long, default_value_t = 25.0)]
    sigma_hat: f64,
    /// Estimator checkpoint; a frozen random network is used when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Fixed shift in rows; drawn from the configured range when absent.
    #[arg(long)]
    k: Option<usize>,
    /// Fixed JPEG fraction in (0, 1]; drawn from the configured range when absent.
    #[arg(long)]
    p: Option<f64>,
}

fn init_logging(verbose: u8) {
    let env = env_logger::Env::new().filter_or("PPDN_LOG", "info");
    let mut builder = env_logger::Builder::from_env(env);
    if verbose > 0 {
        builder.filter_level(if verbose == 1 { log::LevelFilter::Debug } else { log::LevelFilter::Trace });
    }
    builder.target(env_logger::Target::Stderr).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    if let Some(jobs) = cli.global.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code as u8)
        }
    }
}
