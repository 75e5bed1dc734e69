//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use pushpull::degrade::{jpeg_decay_at, shift_rows, JpegSpec, ShiftDirection, ShiftSpec};
use pushpull::eval::{evaluate, EvalOptions, MetricsReport};
use pushpull::image::{extract_patches, load_dir, load_image, mse, ImageTensor, PatchSet};
use pushpull::loss::{pull_loss, push_loss, PullInputs, PushInputs};
use pushpull::metrics::{psnr, ssim, PSNR_CAP_DB};
use pushpull::net::{load_checkpoint, model_to_bytes, save_checkpoint, ArchConfig, Batch, DenoiserModel};
use pushpull::noise::{corrupt, make_observation_pair, NoiseSpec};
use pushpull::rng::{RngStream, StreamId};
use pushpull::theory::{self, DecompositionResult, NetEstimator, ScalingCheck};
use pushpull::train::{NullTelemetry, TrainConfig, Trainer};
use rand::Rng;

const DESK_SEED: u64 = 2024;
const EVAL_SEED: u64 = 68;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

struct Verdict {
    pass: bool,
    detail: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict { pass: true, detail: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.detail.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    fn note(&mut self, line: String) {
        self.detail.push(format!("info {line}"));
    }
}

fn run_criterion(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Verdict { pass: false, detail: vec![format!("FAIL panicked: {msg}")] }
    });
    for line in &verdict.detail {
        println!("      {line}");
    }
    let status = if verdict.pass { "PASS" } else { "FAIL" };
    println!("{status} [{id}] {name} ({:.1}s)", start.elapsed().as_secs_f64());
    verdict.pass
}

fn random_image(rng: &mut RngStream, h: usize, w: usize, c: usize) -> ImageTensor {
    let data = (0..h * w * c).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(h, w, c, data).unwrap()
}

fn natural_image() -> ImageTensor {
    load_image(&data_dir().join("test/chelsea.png")).unwrap()
}

fn operators() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = RngStream::new(1, StreamId::Shift);
    let mut restored = 0;
    for _ in 0..1000 {
        let h = rng.random_range(1..=48);
        let w = rng.random_range(1..=48);
        let c = if rng.random::<bool>() { 3 } else { 1 };
        let img = random_image(&mut rng, h, w, c);
        let k = rng.random_range(0..=ShiftSpec::default().max_rows);
        let dir = if rng.random::<bool>() { ShiftDirection::Up } else { ShiftDirection::Down };
        let back = shift_rows(&shift_rows(&img, dir, k), dir.opposite(), k);
        restored += usize::from(back.data() == img.data());
    }
    v.check(restored == 1000, format!("shift then inverse shift restores input: {restored}/1000"));

    let img = natural_image();
    let same = jpeg_decay_at(&img, 1.0).unwrap();
    v.check(same.data() == img.data(), "jpeg decay at p = 1 is bit-exact".into());

    let m80 = mse(&jpeg_decay_at(&img, 0.8).unwrap(), &img).unwrap();
    let m95 = mse(&jpeg_decay_at(&img, 0.95).unwrap(), &img).unwrap();
    v.check(m80 > m95, format!("jpeg MSE p=0.80 {m80:.3e} > p=0.95 {m95:.3e}"));
    v
}

fn fd_max_rel(loss: &dyn Fn(&mut DenoiserModel<f64>) -> (f64, Vec<f64>), base: &DenoiserModel<f64>) -> f64 {
    let (_, grads) = loss(&mut base.clone());
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..base.trainable_len() {
        let mut plus = base.clone();
        plus.params_mut()[i] += eps;
        let mut minus = base.clone();
        minus.params_mut()[i] -= eps;
        let numeric = (loss(&mut plus).0 - loss(&mut minus).0) / (2.0 * eps);
        let rel = (grads[i] - numeric).abs() / grads[i].abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

fn gradient_checks() -> Verdict {
    let mut v = Verdict::new();
    let noise = NoiseSpec::gaussian(25.0 / 255.0).unwrap();
    let (mut worst_push, mut worst_pull) = (0.0f64, 0.0f64);
    let mut max_params = 0;
    for seed in 0..20u64 {
        let arch = ArchConfig { depth: 3, width: 4, in_channels: 1, out_channels: 1, use_batch_norm: seed % 2 == 0 };
        let base = DenoiserModel::<f64>::init(arch, &mut RngStream::new(seed, StreamId::Init)).unwrap();
        max_params = max_params.max(base.len());
        let mut rng = RngStream::new(seed, StreamId::Noise);
        let pairs: Vec<_> = (0..2)
            .map(|_| {
                let clean = random_image(&mut rng, 8, 8, 1);
                let noisy = corrupt(&clean, &noise, &mut rng).unwrap();
                make_observation_pair(&noisy, &noise, &mut rng).unwrap()
            })
            .collect();
        let mut shift_rng = RngStream::new(seed, StreamId::Shift);
        let push_in = PushInputs::<f64>::draw(&pairs, &ShiftSpec::default(), &JpegSpec::default(), &mut shift_rng, &mut RngStream::new(seed, StreamId::Jpeg)).unwrap();
        let pull_in = PullInputs::<f64>::draw(&pairs, &ShiftSpec::default(), &mut shift_rng).unwrap();
        worst_push = worst_push.max(fd_max_rel(
            &|m| {
                let (t, g) = push_loss(m, &push_in, false).unwrap();
                (t.value, g.gradient(m, 1.0).unwrap())
            },
            &base,
        ));
        worst_pull = worst_pull.max(fd_max_rel(
            &|m| {
                let (t, g) = pull_loss(m, &pull_in).unwrap();
                (t.value, g.gradient(m, 1.0).unwrap())
            },
            &base,
        ));
    }
    v.check(max_params <= 500, format!("largest model has {max_params} parameters"));
    v.check(worst_push < 1e-3, format!("push loss: worst relative error {worst_push:.2e} over 20 seeds"));
    v.check(worst_pull < 1e-3, format!("pull loss: worst relative error {worst_pull:.2e} over 20 seeds"));
    v
}

fn gray_corpus(dir: &Path, patch: usize, channels: usize) -> PatchSet {
    let mut corpus = PatchSet::empty(patch, channels);
    for (i, (_, img)) in load_dir(dir, channels).unwrap().into_iter().enumerate() {
        let set = extract_patches(&img, i, patch, patch, &mut RngStream::new(i as u64, StreamId::Theory)).unwrap();
        corpus.extend(set).unwrap();
    }
    corpus
}

fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

fn theory_decompositions() -> Verdict {
    let mut v = Verdict::new();
    let corpus = gray_corpus(&data_dir().join("train"), 8, 1);
    v.note(format!("{} gray 8x8 patches", corpus.len()));
    let arch = ArchConfig { depth: 3, width: 8, in_channels: 1, out_channels: 1, use_batch_norm: true };
    let net = NetEstimator::new(&DenoiserModel::<f64>::init(arch, &mut RngStream::new(3, StreamId::Init)).unwrap());
    let s = 25.0 / 255.0;
    let methods: [(&str, Box<dyn Fn(usize, &mut RngStream) -> DecompositionResult>); 3] = [
        ("n2n", Box::new(|n, rng| theory::verify_n2n(&corpus, 2.0 * s, s, &net, n, rng).unwrap())),
        ("nr2n", Box::new(|n, rng| theory::verify_nr2n(&corpus, s, s, &net, n, rng).unwrap())),
        ("r2r", Box::new(|n, rng| theory::verify_r2r(&corpus, s, s, s, &net, n, rng).unwrap())),
    ];
    for (m, (name, run)) in methods.iter().enumerate() {
        let stream = RngStream::new(10 + m as u64, StreamId::Theory);
        let small = run(1_000, &mut stream.fork(0));
        let large = run(10_000, &mut stream.fork(1));
        for r in [&small, &large] {
            v.check(
                r.within(4.0),
                format!(
                    "{name} n={}: residual {:+.3e} stderr {:.3e} ({:.2} se); raw {:+.3e}",
                    r.n_samples,
                    r.residual,
                    r.stderr,
                    r.residual.abs() / r.stderr,
                    r.raw_residual
                ),
            );
        }
        let se = ScalingCheck::from_results(&small, &large);
        v.check(
            se.consistent,
            format!("{name} cross stderr ratio {:.2} (expected {:.2})", se.observed_ratio, se.expected_ratio),
        );
        let reps = |n: usize, k: u64| -> Vec<f64> { (0..10).map(|i| run(n, &mut stream.fork(100 + k * 10 + i)).cross_centered).collect() };
        let spread = ScalingCheck::new(1_000, 10_000, rms(&reps(1_000, 0)), rms(&reps(10_000, 1)));
        v.check(
            spread.consistent,
            format!("{name} replicate RMS of cross term ratio {:.2} (expected {:.2})", spread.observed_ratio, spread.expected_ratio),
        );
    }
    let noise = NoiseSpec::gaussian(s).unwrap();
    let pp = theory::verify_pushpull(&corpus, &noise, &JpegSpec::default(), &net, 10_000, &mut RngStream::new(20, StreamId::Theory)).unwrap();
    v.note(format!(
        "pushpull (descriptive): lhs {:.4e} supervised {:.4e} constant {:.4e} raw residual {:+.3e}",
        pp.lhs, pp.supervised, pp.constant, pp.raw_residual
    ));
    v
}

fn constant_reduction() -> Verdict {
    let mut v = Verdict::new();
    let corpus = gray_corpus(&data_dir().join("test"), 40, 3);
    v.check(corpus.len() >= 20, format!("{} natural 40x40 patches", corpus.len()));
    let noise = NoiseSpec::gaussian(25.0 / 255.0).unwrap();
    let jpeg = JpegSpec::new(0.8, 1.0).unwrap();
    let r = theory::verify_constant_reduction(&corpus, &noise, &jpeg, 2_000, &mut RngStream::new(4, StreamId::Theory)).unwrap();
    v.check(r.fraction_closer >= 0.95, format!("|B2 - x| < |A2 - x| in {:.4} of trials", r.fraction_closer));
    v.check(r.fraction_var_ordered >= 0.95, format!("Var[A2] > Var[B2] in {:.4} of trials", r.fraction_var_ordered));
    v.note(format!("decay alone (vs clamped A2) helps in {:.4} of trials", r.fraction_closer_decay_only));
    v.note(format!(
        "RMS distance to clean: A2 {:.4}, clamp(A2) {:.4}, B2 {:.4}",
        r.mean_dist_a2, r.mean_dist_clamped_a2, r.mean_dist_b2
    ));
    v.note(format!("mean variance: A2 {:.5} B2 {:.5} x {:.5}", r.mean_var_a2, r.mean_var_b2, r.mean_var_x));
    v
}

/// Direct 2-D window SSIM, no separable filtering.
fn reference_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    const N: usize = 11;
    let mut win = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *w = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *w;
        }
    }
    let (h, w, c) = a.dims();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    for ch in 0..c {
        let mut plane = 0.0;
        let mut count = 0;
        for r in 0..=h - N {
            for col in 0..=w - N {
                let at = |img: &ImageTensor, i: usize, j: usize| f64::from(img.get(r + i, col + j, ch));
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        ma += win[i][j] / total * at(a, i, j);
                        mb += win[i][j] / total * at(b, i, j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let wt = win[i][j] / total;
                        let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                plane += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        sum += plane / count as f64;
    }
    sum / c as f64
}

fn reference_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.len() as f64;
    let m = a.data().iter().zip(b.data()).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>() / n;
    if m == 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP_DB)
    }
}

fn crafted_pairs() -> Vec<(&'static str, ImageTensor, ImageTensor)> {
    let mut rng = RngStream::new(7, StreamId::Eval);
    let grad = |h, w, c| ImageTensor::from_fn(h, w, c, |r, col, ch| (r + 2 * col + ch) as f32 / (h + 2 * w + c) as f32).unwrap();
    let checker = ImageTensor::from_fn(24, 24, 1, |r, c, _| ((r / 3 + c / 3) % 2) as f32).unwrap();
    let natural = natural_image().crop(30, 40, 32, 32).unwrap();
    let noisy_nat = corrupt(&natural, &NoiseSpec::gaussian(0.1).unwrap(), &mut rng).unwrap().clamp01();
    let noise_a = random_image(&mut rng, 20, 28, 1);
    let noise_b = random_image(&mut rng, 20, 28, 1);
    let g = grad(16, 16, 1);
    vec![
        ("flat vs flat", ImageTensor::filled(16, 16, 1, 0.2).unwrap(), ImageTensor::filled(16, 16, 1, 0.7).unwrap()),
        ("gradient vs contrast", g.clone(), g.map(|v| 0.5 * v + 0.25)),
        ("gradient rgb vs shifted", grad(18, 22, 3), shift_rows(&grad(18, 22, 3), ShiftDirection::Up, 2)),
        ("checker vs inverted", checker.clone(), checker.map(|v| 1.0 - v)),
        ("checker vs blurred", checker.clone(), checker.map(|v| 0.25 + 0.5 * v)),
        ("natural vs noisy", natural.clone(), noisy_nat),
        ("natural vs jpeg", natural.clone(), jpeg_decay_at(&natural, 0.8).unwrap()),
        ("natural vs gray-replicated", natural.clone(), natural.to_channels(1).unwrap().to_channels(3).unwrap()),
        ("uniform noise pair", noise_a.clone(), noise_b),
        ("noise vs offset", noise_a.clone(), noise_a.map(|v| (v + 0.05).min(1.0))),
    ]
}

fn metric_oracles() -> Verdict {
    let mut v = Verdict::new();
    let (mut worst_p, mut worst_s) = (0.0f64, 0.0f64);
    for (name, a, b) in crafted_pairs() {
        let dp = (psnr(&a, &b).unwrap() - reference_psnr(&a, &b)).abs();
        let ds = (ssim(&a, &b).unwrap() - reference_ssim(&a, &b)).abs();
        v.check(dp <= 1e-6 && ds <= 1e-6, format!("{name}: |dPSNR| {dp:.1e} |dSSIM| {ds:.1e}"));
        worst_p = worst_p.max(dp);
        worst_s = worst_s.max(ds);
    }
    v.note(format!("worst deviations: PSNR {worst_p:.1e}, SSIM {worst_s:.1e}"));
    let img = natural_image();
    v.check(psnr(&img, &img.clone()).unwrap() == PSNR_CAP_DB, "psnr of identical images is the 100 dB cap".into());
    v.check(ssim(&img, &img.clone()).unwrap() == 1.0, "ssim of identical images is exactly 1".into());
    v
}

struct DeskRun {
    model: DenoiserModel<f32>,
    report: MetricsReport,
    first_loss: f64,
    last_loss: f64,
    seconds: f64,
}

fn desk_run(sigma: f64) -> DeskRun {
    let start = Instant::now();
    let mut config = TrainConfig::desk_scale();
    config.seed = DESK_SEED;
    config.noise = NoiseSpec::gaussian(sigma).unwrap();
    let mut trainer = Trainer::from_dir(config.clone(), &data_dir().join("train")).unwrap();
    trainer.run(&mut NullTelemetry, None).unwrap();
    let history = &trainer.state().history;
    let (first_loss, last_loss) = (history[0].mean_total, history[history.len() - 1].mean_total);
    let model = trainer.into_model();
    let report = evaluate(&model, &data_dir().join("test"), &config.noise, EVAL_SEED, &EvalOptions::default()).unwrap();
    DeskRun { model, report, first_loss, last_loss, seconds: start.elapsed().as_secs_f64() }
}

fn describe_run(v: &mut Verdict, label: &str, run: &DeskRun) {
    let r = &run.report;
    v.note(format!(
        "{label}: noisy {:.2} dB / {:.4}, denoised {:.2} dB / {:.4}, loss {:.4} -> {:.4}, {:.0}s",
        r.mean_noisy_psnr, r.mean_noisy_ssim, r.mean_psnr, r.mean_ssim, run.first_loss, run.last_loss, run.seconds
    ));
}

fn desk_denoising(run: &DeskRun) -> Verdict {
    let mut v = Verdict::new();
    let config = TrainConfig::desk_scale();
    v.note(format!(
        "depth {} width {} batch norm {} batch {} epochs {}",
        config.arch.depth, config.arch.width, config.arch.use_batch_norm, config.batch_size, config.epochs
    ));
    describe_run(&mut v, "sigma 25", run);
    let r = &run.report;
    for rec in &r.records {
        v.note(format!("{}: {:.2} -> {:.2} dB", rec.name, rec.noisy_psnr, rec.psnr));
    }
    let gain = r.mean_psnr - r.mean_noisy_psnr;
    v.check(gain >= 4.0, format!("PSNR gain {gain:.2} dB (need >= 4)"));
    v.check(r.mean_ssim > r.mean_noisy_ssim, format!("SSIM {:.4} > noisy {:.4}", r.mean_ssim, r.mean_noisy_ssim));
    v.check(run.last_loss < run.first_loss, "final-epoch loss below first-epoch loss".into());
    v
}

fn noise_trend(low: &DeskRun, high: &DeskRun) -> Verdict {
    let mut v = Verdict::new();
    describe_run(&mut v, "sigma 50", high);
    v.check(
        low.report.mean_psnr > high.report.mean_psnr,
        format!("sigma 25 PSNR {:.2} > sigma 50 PSNR {:.2}", low.report.mean_psnr, high.report.mean_psnr),
    );
    v
}

fn reproducibility(a: &DeskRun, b: &DeskRun) -> Verdict {
    let mut v = Verdict::new();
    let (ba, bb) = (model_to_bytes(&a.model), model_to_bytes(&b.model));
    v.check(ba == bb, format!("two seeded runs give identical checkpoints ({} bytes)", ba.len()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ppdn");
    save_checkpoint(&a.model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    v.check(loaded == a.model, "loaded parameters equal saved parameters".into());
    let images: Vec<ImageTensor> = load_dir(&data_dir().join("test"), a.model.arch().in_channels).unwrap().into_iter().map(|(_, i)| i).collect();
    let x = Batch::<f32>::from_images(&images).unwrap();
    let (ya, yb) = (a.model.infer(&x).unwrap(), loaded.infer(&x).unwrap());
    let same = ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    v.check(same, "forward outputs identical after save/load".into());
    v
}

fn main() {
    let start = Instant::now();
    let mut passed = Vec::new();
    passed.push(run_criterion(1, "operator suite", operators));
    passed.push(run_criterion(2, "gradient checks", gradient_checks));
    passed.push(run_criterion(3, "theory decompositions", theory_decompositions));
    passed.push(run_criterion(4, "constant reduction", constant_reduction));
    passed.push(run_criterion(7, "metric oracles", metric_oracles));

    let run = |s: f64| catch_unwind(|| desk_run(s / 255.0)).ok();
    let (a, b, high) = (run(25.0), run(25.0), run(50.0));
    let missing = || Verdict { pass: false, detail: vec!["FAIL desk-scale training did not complete".into()] };
    passed.push(run_criterion(5, "desk-scale denoising", || a.as_ref().map_or_else(missing, desk_denoising)));
    passed.push(run_criterion(6, "noise-level trend", || match (&a, &high) {
        (Some(a), Some(h)) => noise_trend(a, h),
        _ => missing(),
    }));
    passed.push(run_criterion(8, "reproducibility", || match (&a, &b) {
        (Some(a), Some(b)) => reproducibility(a, b),
        _ => missing(),
    }));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed in {:.0}s", passed.len() - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
