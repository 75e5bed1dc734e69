//! Monte-Carlo checks of self-supervised risk decompositions.
//!
//! Every estimate is per-pixel normalized (squared norms divided by the
//! element count `d`). For a target `t = x + n_t` and prediction `f`,
//! `|f - t|^2 = |f - x|^2 + |n_t|^2 - 2 n_t^T (f - x)` holds sample by sample,
//! so `raw_residual` is the mean of the last term. When `n_t` also drives the
//! input, Stein's lemma gives `E[n_t^T f] = sigma^2 E[div f]`; the divergence
//! is estimated with one Rademacher probe `z^T J z` per sample.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::degrade::{jpeg_decay, JpegSpec};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, PatchSet};
use crate::net::{Batch, DenoiserModel, Mode, PassInput, Real};
use crate::noise::{corrupt, make_observation_pair, NoiseSpec};
use crate::rng::RngStream;

pub const MIN_SAMPLES: usize = 100;
const CHUNK: usize = 512;

/// A fixed map `f` and its vector-Jacobian product.
pub trait Estimator {
    fn apply(&self, x: &Batch<f64>) -> Result<Batch<f64>>;
    /// `J(x)^T z` per sample.
    fn vjp(&self, x: &Batch<f64>, z: &Batch<f64>) -> Result<Batch<f64>>;
}

/// Frozen network evaluated in eval mode, so samples never interact.
pub struct NetEstimator {
    model: DenoiserModel<f64>,
}

impl NetEstimator {
    pub fn new<T: Real>(model: &DenoiserModel<T>) -> Self {
        let mut model = model.cast::<f64>();
        model.set_mode(Mode::Eval);
        NetEstimator { model }
    }
}

impl Estimator for NetEstimator {
    fn apply(&self, x: &Batch<f64>) -> Result<Batch<f64>> {
        self.model.infer(x)
    }

    fn vjp(&self, x: &Batch<f64>, z: &Batch<f64>) -> Result<Batch<f64>> {
        let mut m = self.model.clone();
        let mut tape = m.tape();
        let id = m.forward_taped(&mut tape, PassInput::Data(x))?;
        let g = m.backward_full(&tape, &[(id, z.clone())])?;
        Ok(g.inputs.into_iter().nth(id.index()).flatten().expect("data pass has an input gradient"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    N2n,
    Nr2n,
    R2r,
    Pushpull,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::N2n => "n2n",
            Method::Nr2n => "nr2n",
            Method::R2r => "r2r",
            Method::Pushpull => "pushpull",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionResult {
    pub method: Method,
    pub n_samples: usize,
    /// `E|f(input) - target|^2 / d`.
    pub lhs: f64,
    /// `E|f(input) - x|^2 / d`.
    pub supervised: f64,
    /// `2 E[n_t^T f(input)] / d`.
    pub cross: f64,
    pub cross_stderr: f64,
    /// `cross` minus its Stein expectation; zero-mean for every method here.
    pub cross_centered: f64,
    pub cross_centered_stderr: f64,
    /// `E|target - x|^2 / d`.
    pub constant: f64,
    /// `E|target - x| / sqrt(d)`, the unsquared convention.
    pub constant_rms: f64,
    /// Stein expectation of `-2 n_t^T f / d`, subtracted from `raw_residual`.
    pub adjustment: f64,
    /// `lhs - supervised - constant`.
    pub raw_residual: f64,
    pub raw_stderr: f64,
    /// `raw_residual - adjustment`.
    pub residual: f64,
    pub stderr: f64,
}

impl DecompositionResult {
    /// `|residual| <= k * stderr`.
    pub fn within(&self, k: f64) -> bool {
        self.residual.abs() <= k * self.stderr
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("result serializes")
    }
}

/// Neumaier-compensated mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = neumaier(xs.iter().copied()) / n;
    let ss = neumaier(xs.iter().map(|x| (x - mean) * (x - mean)));
    let var = if xs.len() > 1 { ss / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientSamples { got: n, min: MIN_SAMPLES });
    }
    Ok(())
}

fn check_corpus(corpus: &PatchSet) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty clean corpus".into()));
    }
    Ok(())
}

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidNoise(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    Normal::new(0.0, sigma).map_err(|e| Error::InvalidNoise(e.to_string()))
}

fn noise_vec(d: usize, dist: &Normal<f64>, rng: &mut RngStream) -> Vec<f64> {
    (0..d).map(|_| dist.sample(rng)).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One Monte-Carlo draw: clean `x`, network input, regression target.
struct Sample {
    x: Vec<f64>,
    input: Vec<f64>,
    target: Vec<f64>,
}

struct Spec<'a> {
    method: Method,
    /// Variance of the target-noise component shared with the input.
    stein_variance: f64,
    /// Apply the estimator twice (`f(f(input))`).
    compose: bool,
    estimator: &'a dyn Estimator,
}

fn run(
    spec: Spec<'_>,
    corpus: &PatchSet,
    n_samples: usize,
    rng: &mut RngStream,
    mut draw: impl FnMut(&[f64], &mut RngStream) -> Result<Sample>,
) -> Result<DecompositionResult> {
    check_samples(n_samples)?;
    check_corpus(corpus)?;
    let size = corpus.patch_size();
    let ch = corpus.channels();
    let d = size * size * ch;
    let df = d as f64;
    let mut cols: [Vec<f64>; 6] = Default::default();
    let [lhs, sup, cons, cross, adj, cons_rms] = &mut cols;
    let mut done = 0;
    while done < n_samples {
        let m = CHUNK.min(n_samples - done);
        let mut samples = Vec::with_capacity(m);
        for _ in 0..m {
            let idx = rng.random_range(0..corpus.len());
            let x: Vec<f64> = corpus.get(idx).data().iter().map(|&v| f64::from(v)).collect();
            samples.push(draw(&x, rng)?);
        }
        let input = Batch::from_vec(m, size, size, ch, samples.iter().flat_map(|s| s.input.iter().copied()).collect())?;
        let mut out = spec.estimator.apply(&input)?;
        if spec.compose {
            out = spec.estimator.apply(&out)?;
        }
        let div = if spec.stein_variance > 0.0 {
            let z: Vec<f64> = (0..m * d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let z = Batch::from_vec(m, size, size, ch, z)?;
            let jz = spec.estimator.vjp(&input, &z)?;
            (0..m).map(|i| z.sample(i).iter().zip(jz.sample(i)).map(|(a, b)| a * b).sum::<f64>()).collect()
        } else {
            vec![0.0; m]
        };
        for (i, s) in samples.iter().enumerate() {
            let f = out.sample(i);
            let mut l = 0.0;
            let mut su = 0.0;
            let mut co = 0.0;
            let mut cr = 0.0;
            for k in 0..d {
                let nt = s.target[k] - s.x[k];
                l += (f[k] - s.target[k]).powi(2);
                su += (f[k] - s.x[k]).powi(2);
                co += nt * nt;
                cr += nt * f[k];
            }
            lhs.push(l / df);
            sup.push(su / df);
            cons.push(co / df);
            cons_rms.push((co / df).sqrt());
            cross.push(2.0 * cr / df);
            adj.push(-2.0 * spec.stein_variance * div[i] / df);
        }
        done += m;
    }
    let raw: Vec<f64> = (0..n_samples).map(|i| lhs[i] - sup[i] - cons[i]).collect();
    let resid: Vec<f64> = (0..n_samples).map(|i| raw[i] - adj[i]).collect();
    let centered: Vec<f64> = (0..n_samples).map(|i| cross[i] + adj[i]).collect();
    let (raw_residual, raw_stderr) = mean_stderr(&raw);
    let (residual, stderr) = mean_stderr(&resid);
    let (cross_mean, cross_stderr) = mean_stderr(cross);
    let (cross_centered, cross_centered_stderr) = mean_stderr(&centered);
    Ok(DecompositionResult {
        method: spec.method,
        n_samples,
        lhs: mean_stderr(lhs).0,
        supervised: mean_stderr(sup).0,
        cross: cross_mean,
        cross_stderr,
        cross_centered,
        cross_centered_stderr,
        constant: mean_stderr(cons).0,
        constant_rms: mean_stderr(cons_rms).0,
        adjustment: mean_stderr(adj).0,
        raw_residual,
        raw_stderr,
        residual,
        stderr,
    })
}

/// Input `x + n1`, target `x + n2`, independent noises.
pub fn verify_n2n(
    corpus: &PatchSet,
    sigma1: f64,
    sigma2: f64,
    estimator: &dyn Estimator,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<DecompositionResult> {
    let (g1, g2) = (gaussian(sigma1)?, gaussian(sigma2)?);
    let spec = Spec { method: Method::N2n, stein_variance: 0.0, compose: false, estimator };
    run(spec, corpus, n_samples, rng, |x, rng| {
        let n1 = noise_vec(x.len(), &g1, rng);
        let n2 = noise_vec(x.len(), &g2, rng);
        Ok(Sample { input: add(x, &n1), target: add(x, &n2), x: x.to_vec() })
    })
}

/// Input `C1 + n1'` with `C1 = x + n1`, target `C1`.
pub fn verify_nr2n(
    corpus: &PatchSet,
    sigma1: f64,
    sigma_prime: f64,
    estimator: &dyn Estimator,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<DecompositionResult> {
    let (g1, gp) = (gaussian(sigma1)?, gaussian(sigma_prime)?);
    let spec = Spec { method: Method::Nr2n, stein_variance: sigma1 * sigma1, compose: false, estimator };
    run(spec, corpus, n_samples, rng, |x, rng| {
        let c1 = add(x, &noise_vec(x.len(), &g1, rng));
        let input = add(&c1, &noise_vec(x.len(), &gp, rng));
        Ok(Sample { input, target: c1, x: x.to_vec() })
    })
}

/// Input `C1 + n_hat`, target `C1 + n1'`, with `C1 = x + n1`.
pub fn verify_r2r(
    corpus: &PatchSet,
    sigma1: f64,
    sigma_prime: f64,
    sigma_hat: f64,
    estimator: &dyn Estimator,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<DecompositionResult> {
    let (g1, gp, gh) = (gaussian(sigma1)?, gaussian(sigma_prime)?, gaussian(sigma_hat)?);
    let spec = Spec { method: Method::R2r, stein_variance: sigma1 * sigma1, compose: false, estimator };
    run(spec, corpus, n_samples, rng, |x, rng| {
        let c1 = add(x, &noise_vec(x.len(), &g1, rng));
        let input = add(&c1, &noise_vec(x.len(), &gh, rng));
        let target = add(&c1, &noise_vec(x.len(), &gp, rng));
        Ok(Sample { input, target, x: x.to_vec() })
    })
}

/// Input `A1`, prediction `f(f(A1))`, target `B2 = jpeg(clamp(A2))`. The
/// target noise is correlated with the input through `A`, and no closed-form
/// expectation is available, so this result is descriptive only.
pub fn verify_pushpull(
    corpus: &PatchSet,
    noise: &NoiseSpec,
    jpeg: &JpegSpec,
    estimator: &dyn Estimator,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<DecompositionResult> {
    let size = corpus.patch_size();
    let ch = corpus.channels();
    let spec = Spec { method: Method::Pushpull, stein_variance: 0.0, compose: true, estimator };
    run(spec, corpus, n_samples, rng, |x, rng| {
        let clean = ImageTensor::new(size, size, ch, x.iter().map(|&v| v as f32).collect())?;
        let noisy = corrupt(&clean, noise, rng)?;
        let pair = make_observation_pair(&noisy, noise, rng)?;
        let (b2, _) = jpeg_decay(&pair.a2.clamp01(), jpeg, rng)?;
        let to64 = |img: &ImageTensor| img.data().iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
        Ok(Sample { input: to64(&pair.a1), target: to64(&b2), x: x.to_vec() })
    })
}

/// Expected and observed shrinkage of a Monte-Carlo quantity between two
/// sample counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingCheck {
    pub n_small: usize,
    pub n_large: usize,
    /// `sqrt(n_large / n_small)`.
    pub expected_ratio: f64,
    pub observed_ratio: f64,
    /// Observed ratio within a factor of 2 of the expected one.
    pub consistent: bool,
}

impl ScalingCheck {
    pub fn new(n_small: usize, n_large: usize, small: f64, large: f64) -> Self {
        let expected_ratio = (n_large as f64 / n_small as f64).sqrt();
        let observed_ratio = small / large;
        let consistent = observed_ratio >= expected_ratio / 2.0 && observed_ratio <= expected_ratio * 2.0;
        ScalingCheck { n_small, n_large, expected_ratio, observed_ratio, consistent }
    }

    /// Compares the centered cross-term standard errors of two runs.
    pub fn from_results(small: &DecompositionResult, large: &DecompositionResult) -> Self {
        ScalingCheck::new(small.n_samples, large.n_samples, small.cross_centered_stderr, large.cross_centered_stderr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantReductionReport {
    pub n_trials: usize,
    /// Fraction with `|B2 - x| < |A2 - x|`, `A2` unclamped.
    pub fraction_closer: f64,
    /// Fraction with `|B2 - x| < |clamp(A2) - x|`: the effect of the decay
    /// alone. Ties count as no improvement.
    pub fraction_closer_decay_only: f64,
    /// Per-pixel RMS distances to the clean patch.
    pub mean_dist_a2: f64,
    pub mean_dist_clamped_a2: f64,
    pub mean_dist_b2: f64,
    pub mean_var_a2: f64,
    pub mean_var_b2: f64,
    pub mean_var_x: f64,
    /// Fraction of trials with `Var[A2] > Var[B2]`.
    pub fraction_var_ordered: f64,
    /// `mean Var[A2] > mean Var[B2] > mean Var[x]`.
    pub ordering_holds: bool,
}

fn rms_dist(a: &ImageTensor, b: &ImageTensor) -> f64 {
    crate::image::mse(a, b).expect("same shape").sqrt()
}

/// Measures how much closer the decayed target is to the clean patch.
pub fn verify_constant_reduction(
    corpus: &PatchSet,
    noise: &NoiseSpec,
    jpeg: &JpegSpec,
    n_trials: usize,
    rng: &mut RngStream,
) -> Result<ConstantReductionReport> {
    check_samples(n_trials)?;
    check_corpus(corpus)?;
    let mut closer = 0usize;
    let mut closer_decay = 0usize;
    let mut var_ordered = 0usize;
    let mut cols: [Vec<f64>; 6] = Default::default();
    for _ in 0..n_trials {
        let x = corpus.get(rng.random_range(0..corpus.len()));
        let noisy = corrupt(x, noise, rng)?;
        let a2 = make_observation_pair(&noisy, noise, rng)?.a2;
        let a2c = a2.clamp01();
        let (b2, _) = jpeg_decay(&a2c, jpeg, rng)?;
        let (da, dac, db) = (rms_dist(&a2, x), rms_dist(&a2c, x), rms_dist(&b2, x));
        closer += usize::from(db < da);
        closer_decay += usize::from(db < dac);
        let (va, vb) = (a2.variance(), b2.variance());
        var_ordered += usize::from(va > vb);
        for (col, v) in cols.iter_mut().zip([da, dac, db, va, vb, x.variance()]) {
            col.push(v);
        }
    }
    let m = |i: usize| mean_stderr(&cols[i]).0;
    let n = n_trials as f64;
    let (var_a2, var_b2, var_x) = (m(3), m(4), m(5));
    Ok(ConstantReductionReport {
        n_trials,
        fraction_closer: closer as f64 / n,
        fraction_closer_decay_only: closer_decay as f64 / n,
        mean_dist_a2: m(0),
        mean_dist_clamped_a2: m(1),
        mean_dist_b2: m(2),
        mean_var_a2: var_a2,
        mean_var_b2: var_b2,
        mean_var_x: var_x,
        fraction_var_ordered: var_ordered as f64 / n,
        ordering_holds: var_a2 > var_b2 && var_b2 > var_x,
    })
}
