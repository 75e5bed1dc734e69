use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use pushpull::degrade::{jpeg_decay, jpeg_decay_at, shift, shift_rows, ShiftDirection};
use pushpull::eval::{evaluate, EvalOptions};
use pushpull::image::{extract_patches, load_dir, load_image, save_image, PatchSet};
use pushpull::metrics::SsimMode;
use pushpull::net::{load_checkpoint, ArchConfig, DenoiserModel};
use pushpull::noise::{corrupt, NoiseSpec};
use pushpull::rng::{RngStream, StreamId};
use pushpull::theory::{self, NetEstimator};
use pushpull::train::{denoise, resume_training, train, CsvTelemetry, TrainConfig};
use pushpull::Error;

use crate::{Cli, Command, DenoiseArgs, EvalArgs, GlobalArgs, PreviewArgs, TheoryMethod, TrainArgs, VerifyArgs};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATASET: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

type Outcome<T> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidNoise(_) | Error::InvalidDegrade(_) | Error::InvalidArch(_) => EXIT_CONFIG,
        Error::EmptyDataset(_)
        | Error::FileNotFound(_)
        | Error::UnsupportedFormat(_)
        | Error::PatchTooLarge { .. }
        | Error::ImageTooSmall { .. }
        | Error::NonSquarePatch { .. } => EXIT_DATASET,
        Error::DivergedLoss { .. } => EXIT_DIVERGED,
        Error::BadCheckpoint { .. } => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

/// Classifies a library error by its variant.
fn lib(e: Error) -> Failure {
    Failure { code: exit_code(&e), error: e.into() }
}

fn fail(code: i32, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

trait OrExit<T> {
    fn or_exit(self) -> Outcome<T>;
    fn or_exit_as(self, code: i32, what: &str) -> Outcome<T>;
}

impl<T> OrExit<T> for pushpull::Result<T> {
    fn or_exit(self) -> Outcome<T> {
        self.map_err(lib)
    }

    fn or_exit_as(self, code: i32, what: &str) -> Outcome<T> {
        self.map_err(|e| fail(code, anyhow::Error::from(e).context(what.to_string())))
    }
}

pub fn run(cli: &Cli) -> Outcome<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(&cli.global, args),
        Command::Denoise(args) => cmd_denoise(&cli.global, args),
        Command::Eval(args) => cmd_eval(&cli.global, args),
        Command::VerifyTheory(args) => cmd_verify_theory(&cli.global, args),
        Command::DegradePreview(args) => cmd_degrade_preview(&cli.global, args),
    }
}

fn mentions_seed(text: &str) -> bool {
    text.lines().any(|line| {
        let line = line.split('#').next().unwrap_or("");
        line.split_once('=').is_some_and(|(k, _)| k.trim() == "seed")
    })
}

fn time_seed() -> u64 {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    let seed = now.as_secs() ^ u64::from(now.subsec_nanos()).rotate_left(32);
    log::info!("no --seed given; using time-derived seed {seed}");
    seed
}

/// Preset, then --config, then --set, then --seed.
fn build_config(global: &GlobalArgs, mut config: TrainConfig) -> Outcome<TrainConfig> {
    let mut seed_given = false;
    if let Some(path) = &global.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| fail(EXIT_CONFIG, e))?;
        config.apply_text(&text).or_exit()?;
        seed_given |= mentions_seed(&text);
    }
    for assignment in &global.sets {
        config.set_pair(assignment).or_exit()?;
        seed_given |= mentions_seed(assignment);
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    } else if !seed_given {
        config.seed = time_seed();
    }
    config.validate().or_exit()?;
    Ok(config)
}

fn echo_config(config: &TrainConfig) {
    println!("# effective configuration");
    print!("{}", config.to_config_string());
    println!();
}

fn load_model(path: &Path) -> Outcome<DenoiserModel<f32>> {
    load_checkpoint(path).or_exit_as(EXIT_CHECKPOINT, &format!("loading checkpoint {}", path.display()))
}

fn unix_timestamp() -> String {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs().to_string()
}

fn levels(sigma: f64) -> f64 {
    sigma / 255.0
}

fn cmd_train(global: &GlobalArgs, args: &TrainArgs) -> Outcome<()> {
    let preset = if args.desk { TrainConfig::desk_scale() } else { TrainConfig::default() };
    let config = build_config(global, preset)?;
    echo_config(&config);
    if !args.data.is_dir() {
        return Err(fail(EXIT_DATASET, anyhow!("training directory {} does not exist", args.data.display())));
    }
    let telemetry = args.telemetry.clone().unwrap_or_else(|| args.out.with_extension("telemetry.csv"));
    let mut sink = CsvTelemetry::open(&telemetry).or_exit()?;
    let model = match &args.resume {
        Some(from) => resume_training(config, &args.data, from, &args.out, &mut sink).map_err(|e| match e {
            Error::FileNotFound(_) => fail(EXIT_CHECKPOINT, anyhow::Error::from(e).context("resuming")),
            other => lib(other),
        })?,
        None => train(config, &args.data, &args.out, &mut sink).or_exit()?,
    };
    println!("checkpoint: {}", args.out.display());
    println!("telemetry: {}", telemetry.display());
    println!("parameters: {}", model.len());
    Ok(())
}

fn cmd_denoise(global: &GlobalArgs, args: &DenoiseArgs) -> Outcome<()> {
    let model = load_model(&args.model)?;
    let channels = model.arch().in_channels;
    let mut input = load_image(&args.input).or_exit()?.to_channels(channels).or_exit()?;
    if let Some(sigma) = args.add_noise {
        let seed = global.seed.unwrap_or_else(time_seed);
        let spec = NoiseSpec::gaussian(levels(sigma)).or_exit()?;
        input = corrupt(&input, &spec, &mut RngStream::new(seed, StreamId::Noise)).or_exit()?;
        if let Some(path) = &args.noisy_output {
            save_image(&input, path).or_exit()?;
        }
    }
    let out = denoise(&model, &input, args.two_pass).or_exit()?;
    save_image(&out, &args.output).or_exit()?;
    println!("{} ({}x{}x{})", args.output.display(), out.height(), out.width(), out.channels());
    Ok(())
}

fn cmd_eval(global: &GlobalArgs, args: &EvalArgs) -> Outcome<()> {
    let mut config = build_config(global, TrainConfig::default())?;
    if let Some(sigma) = args.sigma {
        config.noise = NoiseSpec::gaussian(levels(sigma)).or_exit()?;
    }
    let ssim_mode = SsimMode::parse(&args.ssim_mode).or_exit()?;
    println!("# noise = {}", config.noise.describe());
    println!("# seed = {}", config.seed);
    let model = load_model(&args.model)?;
    let opts = EvalOptions { two_pass: args.two_pass, ssim_mode };
    let mut report = evaluate(&model, &args.data, &config.noise, config.seed, &opts).or_exit()?;
    report.checkpoint = Some(args.model.display().to_string());
    report.timestamp = Some(unix_timestamp());
    report.write(&args.csv, &args.json).or_exit()?;
    println!("{}", report.headline());
    println!("noisy input: {:.4}/{:.2}", report.mean_noisy_ssim, report.mean_noisy_psnr);
    Ok(())
}

fn theory_corpus(dir: &Path, patch: usize, channels: usize, seed: u64) -> Outcome<PatchSet> {
    let mut corpus = PatchSet::empty(patch, channels);
    let base = RngStream::new(seed, StreamId::Theory);
    for (i, (_, img)) in load_dir(dir, channels).or_exit()?.into_iter().enumerate() {
        if img.height() < patch || img.width() < patch {
            continue;
        }
        let set = extract_patches(&img, i, patch, patch, &mut base.fork(i as u64)).or_exit()?;
        corpus.extend(set).or_exit()?;
    }
    if corpus.is_empty() {
        return Err(lib(Error::EmptyDataset(dir.to_path_buf())));
    }
    Ok(corpus)
}

fn theory_estimator(model: Option<&Path>, seed: u64) -> Outcome<NetEstimator> {
    let model = match model {
        Some(path) => load_model(path)?,
        None => {
            let arch = ArchConfig { depth: 3, width: 8, in_channels: 1, out_channels: 1, use_batch_norm: true };
            DenoiserModel::init(arch, &mut RngStream::new(seed, StreamId::Init)).or_exit()?
        }
    };
    if model.arch().in_channels != 1 {
        return Err(fail(EXIT_CONFIG, anyhow!("theory checks run on gray patches; the estimator must take 1 channel")));
    }
    Ok(NetEstimator::new(&model))
}

fn cmd_verify_theory(global: &GlobalArgs, args: &VerifyArgs) -> Outcome<()> {
    let config = build_config(global, TrainConfig::default())?;
    let seed = config.seed;
    println!("# seed = {seed}");
    let mut rng = RngStream::new(seed, StreamId::Theory).fork(u64::MAX);
    let report = if args.method == TheoryMethod::Constant {
        let corpus = theory_corpus(&args.data, args.patch.unwrap_or(40), 3, seed)?;
        let r = theory::verify_constant_reduction(&corpus, &config.noise, &config.jpeg, args.samples, &mut rng).or_exit()?;
        serde_json::to_value(&r).map_err(|e| fail(EXIT_FAILURE, e.into()))?
    } else {
        let corpus = theory_corpus(&args.data, args.patch.unwrap_or(8), 1, seed)?;
        let est = theory_estimator(args.model.as_deref(), seed)?;
        let (s1, sp, sh) = (levels(args.sigma1), levels(args.sigma_prime), levels(args.sigma_hat));
        let n = args.samples;
        let r = match args.method {
            TheoryMethod::N2n => {
                let s2 = args.sigma2.map(levels).unwrap_or(s1 / 2.0);
                theory::verify_n2n(&corpus, s1, s2, &est, n, &mut rng)
            }
            TheoryMethod::Nr2n => theory::verify_nr2n(&corpus, s1, sp, &est, n, &mut rng),
            TheoryMethod::R2r => theory::verify_r2r(&corpus, s1, sp, sh, &est, n, &mut rng),
            TheoryMethod::Pushpull => theory::verify_pushpull(&corpus, &config.noise, &config.jpeg, &est, n, &mut rng),
            TheoryMethod::Constant => unreachable!(),
        }
        .or_exit()?;
        log::info!("|residual| / stderr = {:.3}", r.residual.abs() / r.stderr);
        r.to_json()
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| fail(EXIT_FAILURE, e.into()))?;
    println!("{text}");
    if let Some(path) = &args.out {
        fs::write(path, text + "\n").map_err(|e| fail(EXIT_FAILURE, e.into()))?;
    }
    Ok(())
}

fn cmd_degrade_preview(global: &GlobalArgs, args: &PreviewArgs) -> Outcome<()> {
    let config = build_config(global, TrainConfig::default())?;
    let img = load_image(&args.input).or_exit()?;
    let name = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    fs::create_dir_all(&args.out_dir).map_err(|e| fail(EXIT_FAILURE, e.into()))?;
    let (shifted, k) = match args.k {
        Some(k) => (shift_rows(&img, ShiftDirection::Up, k), k),
        None => shift(&img, ShiftDirection::Up, &config.shift, &mut RngStream::new(config.seed, StreamId::Shift)),
    };
    let (decayed, p) = match args.p {
        Some(p) => (jpeg_decay_at(&img, p).or_exit()?, p),
        None => jpeg_decay(&img, &config.jpeg, &mut RngStream::new(config.seed, StreamId::Jpeg)).or_exit()?,
    };
    let shift_path = args.out_dir.join(format!("{name}_shift_k{k}.png"));
    let jpeg_path = args.out_dir.join(format!("{name}_jpeg_p{p:.3}.png"));
    save_image(&shifted, &shift_path).or_exit()?;
    save_image(&decayed, &jpeg_path).or_exit()?;
    println!("{}", shift_path.display());
    println!("{}", jpeg_path.display());
    Ok(())
}
