//! Evaluation over a directory of clean test images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::error::Result;
use crate::image::{list_pngs, load_image};
use crate::metrics::{psnr, ssim_with, SsimMode};
use crate::net::DenoiserModel;
use crate::noise::{corrupt, NoiseSpec};
use crate::rng::{stable_hash, RngStream, StreamId};
use crate::train::denoise;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image rows sorted by name, with their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub noise: String,
    pub checkpoint: Option<String>,
    /// Set by the caller; evaluation itself is timestamp-free for determinism.
    pub timestamp: Option<String>,
    pub records: Vec<ImageRecord>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_noisy_psnr: f64,
    pub mean_noisy_ssim: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    pub fn from_records(dataset: String, noise: String, mut records: Vec<ImageRecord>) -> Self {
        records.sort_by(|a, b| a.name.cmp(&b.name));
        MetricsReport {
            mean_psnr: mean(records.iter().map(|r| r.psnr)),
            mean_ssim: mean(records.iter().map(|r| r.ssim)),
            mean_noisy_psnr: mean(records.iter().map(|r| r.noisy_psnr)),
            mean_noisy_ssim: mean(records.iter().map(|r| r.noisy_ssim)),
            dataset,
            noise,
            checkpoint: None,
            timestamp: None,
            records,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,noisy_psnr,noisy_ssim,psnr,ssim\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.noisy_psnr, r.noisy_ssim, r.psnr, r.ssim);
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let mut v = json!({
            "dataset": self.dataset,
            "noise": self.noise,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "mean_noisy_psnr": self.mean_noisy_psnr,
            "mean_noisy_ssim": self.mean_noisy_ssim,
            "n_images": self.records.len(),
            "checkpoint": self.checkpoint,
        });
        if let Some(t) = &self.timestamp {
            v["timestamp"] = json!(t);
        }
        v
    }

    /// `SSIM/PSNR = 0.xxxx/yy.yy`.
    pub fn headline(&self) -> String {
        format!("SSIM/PSNR = {:.4}/{:.2}", self.mean_ssim, self.mean_psnr)
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv())?;
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("report is valid JSON");
        fs::write(json_path, text + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub two_pass: bool,
    pub ssim_mode: SsimMode,
}

/// Noise stream for one test image; independent of directory order.
pub fn image_noise_stream(seed: u64, name: &str) -> RngStream {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(name.as_bytes());
    RngStream::new(stable_hash(&key), StreamId::Eval)
}

/// Corrupts every PNG in `dir`, denoises it and scores both against the clean
/// image. Noisy scores use the clamped noisy image.
pub fn evaluate(model: &DenoiserModel<f32>, dir: &Path, noise: &NoiseSpec, seed: u64, opts: &EvalOptions) -> Result<MetricsReport> {
    let files = list_pngs(dir)?;
    let channels = model.arch().in_channels;
    let records = files
        .par_iter()
        .map(|path| {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let clean = load_image(path)?.to_channels(channels)?;
            let noisy = corrupt(&clean, noise, &mut image_noise_stream(seed, &name))?;
            let shown = noisy.clamp01();
            let out = denoise(model, &noisy, opts.two_pass)?;
            Ok(ImageRecord {
                noisy_psnr: psnr(&shown, &clean)?,
                noisy_ssim: ssim_with(&shown, &clean, opts.ssim_mode)?,
                psnr: psnr(&out, &clean)?,
                ssim: ssim_with(&out, &clean, opts.ssim_mode)?,
                name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(MetricsReport::from_records(dataset, noise.describe(), records))
}
