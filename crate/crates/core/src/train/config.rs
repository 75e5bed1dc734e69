//! `key = value` configuration text with `#` comments. Real values may be
//! written as fractions (`25/255`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::degrade::{JpegSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::net::ArchConfig;
use crate::noise::NoiseSpec;

/// How the push and pull gradients are applied within one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// One Adam update on `push + pull_weight * pull`.
    Combined,
    /// Four sequential updates, one per squared-error term.
    FourStep,
}

impl UpdateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateMode::Combined => "combined",
            UpdateMode::FourStep => "four-step",
        }
    }
}

/// Step decay of the learning rate.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    /// Halve at 25%, 50% and 75% of the epoch budget.
    Quartiles,
    /// Constant learning rate.
    Constant,
    /// `(epoch, multiplier)`: epochs after `epoch` are scaled by `multiplier`.
    Steps(Vec<(usize, f64)>),
}

impl LrSchedule {
    /// Learning rate for 1-based `epoch` of a run of `epochs`.
    pub fn lr_at(&self, lr_initial: f64, epoch: usize, epochs: usize) -> f64 {
        let steps: Vec<(usize, f64)> = match self {
            LrSchedule::Quartiles => [1, 2, 3]
                .iter()
                .map(|q| ((epochs * q + 2) / 4, 0.5))
                .filter(|&(e, _)| e >= 1)
                .collect(),
            LrSchedule::Constant => Vec::new(),
            LrSchedule::Steps(s) => s.clone(),
        };
        steps.iter().filter(|&&(e, _)| epoch > e).fold(lr_initial, |lr, &(_, m)| lr * m)
    }

    fn parse(value: &str) -> Result<Self> {
        match value {
            "quartiles" | "default" => Ok(LrSchedule::Quartiles),
            "constant" | "none" => Ok(LrSchedule::Constant),
            list => {
                let mut steps = Vec::new();
                for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (e, m) = item
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("lr_schedule entry `{item}` is not epoch:multiplier")))?;
                    let epoch = parse_count("lr_schedule", e)?;
                    let mult = parse_real("lr_schedule", m)?;
                    if mult <= 0.0 {
                        return Err(Error::Config(format!("lr_schedule multiplier must be > 0, got {mult}")));
                    }
                    steps.push((epoch, mult));
                }
                steps.sort_by_key(|&(e, _)| e);
                Ok(LrSchedule::Steps(steps))
            }
        }
    }

    fn render(&self) -> String {
        match self {
            LrSchedule::Quartiles => "quartiles".into(),
            LrSchedule::Constant => "constant".into(),
            LrSchedule::Steps(s) => s.iter().map(|(e, m)| format!("{e}:{m}")).collect::<Vec<_>>().join(","),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Patch grid spacing; equal to `patch_size` gives non-overlapping tiles.
    pub stride: usize,
    pub lr_initial: f64,
    pub lr_schedule: LrSchedule,
    pub noise: NoiseSpec,
    pub shift: ShiftSpec,
    pub jpeg: JpegSpec,
    pub pull_weight: f64,
    pub seed: u64,
    pub update_mode: UpdateMode,
    /// Treat `D1` as a constant input to the second network application.
    pub detach_inner: bool,
    pub arch: ArchConfig,
    /// Epochs between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Random dihedral transform of each patch per epoch.
    pub augment: bool,
    pub val_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 16,
            patch_size: 40,
            stride: 40,
            lr_initial: 1e-3,
            lr_schedule: LrSchedule::Quartiles,
            noise: NoiseSpec::Gaussian { sigma: 25.0 / 255.0 },
            shift: ShiftSpec::default(),
            jpeg: JpegSpec::default(),
            pull_weight: 1.0,
            seed: 0,
            update_mode: UpdateMode::Combined,
            detach_inner: false,
            arch: ArchConfig::default(),
            checkpoint_every: 25,
            augment: true,
            val_dir: None,
        }
    }
}

fn parse_real(key: &str, v: &str) -> Result<f64> {
    let bad = || Error::Config(format!("{key}: `{v}` is not a number"));
    let x = match v.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            n / d
        }
        None => v.parse().map_err(|_| bad())?,
    };
    if !x.is_finite() {
        return Err(bad());
    }
    Ok(x)
}

fn parse_count(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

impl TrainConfig {
    /// Depth-8 width-32 model for 20 epochs.
    /// 20 epochs of the reduced model at batch size 8.
    pub fn desk_scale() -> Self {
        TrainConfig { epochs: 20, batch_size: 8, arch: ArchConfig::desk_scale(3), ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 || self.stride == 0 {
            return Err(Error::Config("epochs, batch_size, patch_size and stride must be >= 1".into()));
        }
        if !(self.lr_initial > 0.0) {
            return Err(Error::Config(format!("lr_initial must be > 0, got {}", self.lr_initial)));
        }
        if !(self.pull_weight >= 0.0) {
            return Err(Error::Config(format!("pull_weight must be >= 0, got {}", self.pull_weight)));
        }
        if self.patch_size < 8 {
            return Err(Error::Config("patch_size must be >= 8 for the block transform".into()));
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.jpeg.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_count(key, v)?,
            "batch_size" => self.batch_size = parse_count(key, v)?,
            "patch_size" => self.patch_size = parse_count(key, v)?,
            "stride" => self.stride = parse_count(key, v)?,
            "lr_initial" => self.lr_initial = parse_real(key, v)?,
            "lr_schedule" => self.lr_schedule = LrSchedule::parse(v)?,
            "noise.family" => {
                self.noise = match (v, self.noise) {
                    ("gaussian", n @ NoiseSpec::Gaussian { .. }) | ("poisson", n @ NoiseSpec::Poisson { .. }) => n,
                    ("gaussian", _) => NoiseSpec::Gaussian { sigma: 25.0 / 255.0 },
                    ("poisson", _) => NoiseSpec::Poisson { lambda_lo: 5.0, lambda_hi: 50.0 },
                    _ => return Err(Error::Config(format!("noise.family: unknown family `{v}`"))),
                }
            }
            "noise.sigma" => match &mut self.noise {
                NoiseSpec::Gaussian { sigma } => *sigma = parse_real(key, v)?,
                NoiseSpec::Poisson { .. } => return Err(Error::Config("noise.sigma needs noise.family = gaussian".into())),
            },
            "noise.lambda_lo" | "noise.lambda_hi" => match &mut self.noise {
                NoiseSpec::Poisson { lambda_lo, lambda_hi } => {
                    let x = parse_real(key, v)?;
                    if key.ends_with("lo") {
                        *lambda_lo = x;
                    } else {
                        *lambda_hi = x;
                    }
                }
                NoiseSpec::Gaussian { .. } => return Err(Error::Config(format!("{key} needs noise.family = poisson"))),
            },
            "shift.max_rows" => self.shift.max_rows = parse_count(key, v)?,
            "jpeg.p_lo" => self.jpeg.p_lo = parse_real(key, v)?,
            "jpeg.p_hi" => self.jpeg.p_hi = parse_real(key, v)?,
            "pull_weight" => self.pull_weight = parse_real(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| Error::Config(format!("seed: `{v}` is not a u64")))?,
            "update_mode" => {
                self.update_mode = match v {
                    "combined" => UpdateMode::Combined,
                    "four-step" => UpdateMode::FourStep,
                    _ => return Err(Error::Config(format!("update_mode: `{v}` is not combined or four-step"))),
                }
            }
            "detach_inner" => self.detach_inner = parse_bool(key, v)?,
            "arch.depth" => self.arch.depth = parse_count(key, v)?,
            "arch.width" => self.arch.width = parse_count(key, v)?,
            "arch.channels" => {
                let c = parse_count(key, v)?;
                self.arch.in_channels = c;
                self.arch.out_channels = c;
            }
            "arch.batch_norm" => self.arch.use_batch_norm = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_count(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "val_dir" => self.val_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` (or `key = value`) text.
    pub fn set_pair(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        TrainConfig::parse(&text)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("stride", self.stride.to_string());
        kv("lr_initial", self.lr_initial.to_string());
        kv("lr_schedule", self.lr_schedule.render());
        match self.noise {
            NoiseSpec::Gaussian { sigma } => {
                kv("noise.family", "gaussian".into());
                kv("noise.sigma", sigma.to_string());
            }
            NoiseSpec::Poisson { lambda_lo, lambda_hi } => {
                kv("noise.family", "poisson".into());
                kv("noise.lambda_lo", lambda_lo.to_string());
                kv("noise.lambda_hi", lambda_hi.to_string());
            }
        }
        kv("shift.max_rows", self.shift.max_rows.to_string());
        kv("jpeg.p_lo", self.jpeg.p_lo.to_string());
        kv("jpeg.p_hi", self.jpeg.p_hi.to_string());
        kv("pull_weight", self.pull_weight.to_string());
        kv("seed", self.seed.to_string());
        kv("update_mode", self.update_mode.as_str().into());
        kv("detach_inner", self.detach_inner.to_string());
        kv("arch.depth", self.arch.depth.to_string());
        kv("arch.width", self.arch.width.to_string());
        kv("arch.channels", self.arch.in_channels.to_string());
        kv("arch.batch_norm", self.arch.use_batch_norm.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("augment", self.augment.to_string());
        if let Some(dir) = &self.val_dir {
            kv("val_dir", dir.display().to_string());
        }
        s
    }
}
