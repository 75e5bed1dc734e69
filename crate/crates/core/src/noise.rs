//! Synthetic corruption and observation-pair generation.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

/// Noise family and level. Gaussian `sigma` is in `[0, 1]` pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum NoiseSpec {
    Gaussian { sigma: f64 },
    Poisson { lambda_lo: f64, lambda_hi: f64 },
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let spec = NoiseSpec::Gaussian { sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn poisson(lambda_lo: f64, lambda_hi: f64) -> Result<Self> {
        let spec = NoiseSpec::Poisson { lambda_lo, lambda_hi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Gaussian { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                Err(Error::InvalidNoise(format!("sigma must be finite and >= 0, got {sigma}")))
            }
            NoiseSpec::Poisson { lambda_lo, lambda_hi }
                if !(lambda_lo.is_finite() && lambda_hi.is_finite() && 0.0 < lambda_lo && lambda_lo <= lambda_hi) =>
            {
                Err(Error::InvalidNoise(format!("need 0 < lambda_lo <= lambda_hi, got [{lambda_lo}, {lambda_hi}]")))
            }
            _ => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            NoiseSpec::Gaussian { sigma } => format!("gaussian(sigma={:.2}/255)", sigma * 255.0),
            NoiseSpec::Poisson { lambda_lo, lambda_hi } => format!("poisson(lambda=[{lambda_lo}, {lambda_hi}])"),
        }
    }

    fn draw_lambda(lo: f64, hi: f64, rng: &mut RngStream) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

fn add_gaussian(img: &ImageTensor, sigma: f64, rng: &mut RngStream) -> Result<ImageTensor> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidNoise(e.to_string()))?;
    let data = img
        .data()
        .iter()
        .map(|&v| (f64::from(v) + normal.sample(rng)) as f32)
        .collect();
    Ok(img.with_data_unclamped(data))
}

/// `PoissonSample(lambda * v) / lambda` per element. Inputs are expected in `[0, 1]`.
fn poisson_resample(img: &ImageTensor, lambda: f64, rng: &mut RngStream) -> Result<ImageTensor> {
    let mut data = Vec::with_capacity(img.len());
    for &v in img.data() {
        let rate = lambda * f64::from(v);
        let count = if rate > 0.0 {
            Poisson::new(rate).map_err(|e| Error::InvalidNoise(e.to_string()))?.sample(rng)
        } else {
            0.0
        };
        data.push((count / lambda) as f32);
    }
    Ok(img.with_data_unclamped(data))
}

/// Corrupts a clean image. Gaussian adds i.i.d. `N(0, sigma^2)`; Poisson draws
/// one `lambda` for the image and resamples counts. The result is not clamped.
pub fn corrupt(clean: &ImageTensor, spec: &NoiseSpec, rng: &mut RngStream) -> Result<ImageTensor> {
    spec.validate()?;
    match *spec {
        NoiseSpec::Gaussian { sigma } => add_gaussian(clean, sigma, rng),
        NoiseSpec::Poisson { lambda_lo, lambda_hi } => {
            let lambda = NoiseSpec::draw_lambda(lambda_lo, lambda_hi, rng);
            poisson_resample(&clean.clamp01(), lambda, rng)
        }
    }
}

/// Two independent re-corruptions `(A1, A2)` of one noisy image `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPair {
    pub a1: ImageTensor,
    pub a2: ImageTensor,
    pub source: ImageTensor,
}

/// Gaussian: `A + O1`, `A + O2` with the configured sigma. Poisson: two
/// resamplings of `clamp(A)` sharing one `lambda` per call.
pub fn make_observation_pair(noisy: &ImageTensor, spec: &NoiseSpec, rng: &mut RngStream) -> Result<ObservationPair> {
    spec.validate()?;
    let (a1, a2) = match *spec {
        NoiseSpec::Gaussian { sigma } => (add_gaussian(noisy, sigma, rng)?, add_gaussian(noisy, sigma, rng)?),
        NoiseSpec::Poisson { lambda_lo, lambda_hi } => {
            let lambda = NoiseSpec::draw_lambda(lambda_lo, lambda_hi, rng);
            let base = noisy.clamp01();
            (poisson_resample(&base, lambda, rng)?, poisson_resample(&base, lambda, rng)?)
        }
    };
    Ok(ObservationPair { a1, a2, source: noisy.clone() })
}
