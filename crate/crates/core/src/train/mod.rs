//! Training loop, checkpoints and inference.

mod config;
mod state;
mod telemetry;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::image::{augment, extract_patches, list_pngs, load_image, ImageTensor, PatchSet};
use crate::loss::{pull_loss, push_loss, PullInputs, PushInputs};
use crate::net::{apply_update, load_checkpoint, save_checkpoint, Batch, DenoiserModel, Mode};
use crate::noise::{corrupt, make_observation_pair, ObservationPair};
use crate::rng::{RngStream, StreamId};

pub use config::{LrSchedule, TrainConfig, UpdateMode};
pub use state::{EpochSummary, TrainState};
pub use telemetry::{CsvTelemetry, MemoryTelemetry, NullTelemetry, StepRecord, TelemetrySink, TELEMETRY_HEADER};

/// Patches from every PNG in `dir`, on the configured grid. Images smaller
/// than one patch are skipped.
pub fn load_training_patches(dir: &Path, config: &TrainConfig) -> Result<PatchSet> {
    let channels = config.arch.in_channels;
    let mut set = PatchSet::empty(config.patch_size, channels);
    for (id, path) in list_pngs(dir)?.iter().enumerate() {
        let img = load_image(path)?.to_channels(channels)?;
        let mut rng = RngStream::new(config.seed, StreamId::BatchOrder).fork(u64::MAX - id as u64);
        match extract_patches(&img, id, config.patch_size, config.stride, &mut rng) {
            Ok(p) => set.extend(p)?,
            Err(Error::PatchTooLarge { .. }) => log::warn!("skipping {}: smaller than one patch", path.display()),
            Err(e) => return Err(e),
        }
    }
    if set.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(set)
}

/// Where checkpoints go: the final model at `model_out`, periodic models at
/// `<stem>_epoch<NNNN>.ppdn`, and the train state at `<model_out>.state`.
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    pub model_out: PathBuf,
    pub every: usize,
}

impl CheckpointPlan {
    pub fn state_path(&self) -> PathBuf {
        state_path_for(&self.model_out)
    }

    pub fn periodic_path(&self, epoch: usize) -> PathBuf {
        let stem = self.model_out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        self.model_out.with_file_name(format!("{stem}_epoch{epoch:04}.ppdn"))
    }
}

pub fn state_path_for(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

pub struct Trainer {
    config: TrainConfig,
    patches: PatchSet,
    model: DenoiserModel<f32>,
    state: TrainState,
}

struct StepLosses {
    push: f64,
    pull: f64,
}

impl Trainer {
    /// Fresh model initialized from the `Init` stream of `config.seed`.
    pub fn new(config: TrainConfig, patches: PatchSet) -> Result<Self> {
        config.validate()?;
        let model = DenoiserModel::init(config.arch, &mut RngStream::new(config.seed, StreamId::Init))?;
        let state = TrainState::new(config.seed, model.trainable_len());
        Trainer::resume(config, patches, model, state)
    }

    pub fn from_dir(config: TrainConfig, dir: &Path) -> Result<Self> {
        let patches = load_training_patches(dir, &config)?;
        Trainer::new(config, patches)
    }

    /// Continues after `state.epoch` with the given model and optimizer state.
    pub fn resume(config: TrainConfig, patches: PatchSet, model: DenoiserModel<f32>, state: TrainState) -> Result<Self> {
        config.validate()?;
        if patches.is_empty() {
            return Err(Error::EmptyDataset(PathBuf::new()));
        }
        if patches.channels() != config.arch.in_channels || patches.patch_size() != config.patch_size {
            return Err(Error::ShapeMismatch(format!(
                "patches are {}x{}x{}, config wants {}x{}x{}",
                patches.patch_size(),
                patches.patch_size(),
                patches.channels(),
                config.patch_size,
                config.patch_size,
                config.arch.in_channels
            )));
        }
        if *model.arch() != config.arch {
            return Err(Error::InvalidArch(format!("model {:?} does not match config {:?}", model.arch(), config.arch)));
        }
        if state.adam.m.len() != model.trainable_len() {
            return Err(Error::LengthMismatch { expected: model.trainable_len(), actual: state.adam.m.len() });
        }
        if state.seed != config.seed {
            log::warn!("resuming with seed {} over a state written with seed {}", config.seed, state.seed);
        }
        Ok(Trainer { config, patches, model, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DenoiserModel<f32> {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_model(self) -> DenoiserModel<f32> {
        self.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches.len().div_ceil(self.config.batch_size)
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.config.lr_schedule.lr_at(self.config.lr_initial, epoch, self.config.epochs)
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.patches.len()).collect();
        order.shuffle(&mut RngStream::new(self.config.seed, StreamId::BatchOrder).fork(epoch as u64));
        order
    }

    /// Clean patch -> noisy `A` -> pair, with streams keyed by (epoch, patch).
    fn make_pairs(&self, epoch: usize, indices: &[usize]) -> Result<Vec<ObservationPair>> {
        let seed = self.config.seed;
        indices
            .iter()
            .map(|&idx| {
                let key = idx as u64;
                let patch = self.patches.get(idx);
                let clean = if self.config.augment {
                    augment(patch, &mut RngStream::new(seed, StreamId::Augment).fork(epoch as u64).fork(key))?
                } else {
                    patch.clone()
                };
                let mut rng = RngStream::new(seed, StreamId::Noise).fork(epoch as u64).fork(key);
                let noisy = corrupt(&clean, &self.config.noise, &mut rng)?;
                make_observation_pair(&noisy, &self.config.noise, &mut rng)
            })
            .collect()
    }

    fn diverged(&self, epoch: usize, step: u64, detail: String) -> Error {
        Error::DivergedLoss { epoch, step: step as usize, detail }
    }

    fn update(&mut self, grads: &[f32], lr: f64, epoch: usize) -> Result<()> {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(self.diverged(epoch, self.state.step, format!("non-finite gradient at parameter {i}")));
        }
        apply_update(&mut self.model, grads, &mut self.state.adam, lr)
    }

    fn check_finite(&self, epoch: usize, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(self.diverged(epoch, self.state.step, format!("{what} = {v}")))
        }
    }

    fn step(&mut self, epoch: usize, step_in_epoch: usize, pairs: &[ObservationPair], lr: f64) -> Result<StepLosses> {
        let seed = self.config.seed;
        let key = |id| RngStream::new(seed, id).fork(epoch as u64).fork(step_in_epoch as u64);
        let mut shift_rng = key(StreamId::Shift);
        let push_in = PushInputs::<f32>::draw(pairs, &self.config.shift, &self.config.jpeg, &mut shift_rng, &mut key(StreamId::Jpeg))?;
        let pull_in = PullInputs::<f32>::draw(pairs, &self.config.shift, &mut shift_rng)?;
        let w = self.config.pull_weight;
        let detach = self.config.detach_inner;
        self.model.set_mode(Mode::Train);
        match self.config.update_mode {
            UpdateMode::Combined => {
                let (push, graph) = push_loss(&mut self.model, &push_in, detach)?;
                self.check_finite(epoch, "push loss", push.value)?;
                let mut grads = graph.gradient(&self.model, 1.0)?;
                drop(graph);
                let (pull, graph) = pull_loss(&mut self.model, &pull_in)?;
                self.check_finite(epoch, "pull loss", pull.value)?;
                for (g, p) in grads.iter_mut().zip(graph.gradient(&self.model, w)?) {
                    *g += p;
                }
                drop(graph);
                self.update(&grads, lr, epoch)?;
                Ok(StepLosses { push: push.value, pull: pull.value })
            }
            UpdateMode::FourStep => {
                let mut push_value = 0.0;
                let mut pull_value = 0.0;
                for term in 0..2 {
                    let (push, graph) = push_loss(&mut self.model, &push_in, detach)?;
                    self.check_finite(epoch, "push loss", push.value)?;
                    if term == 0 {
                        push_value = push.value;
                    }
                    let g = graph.term_gradient(&self.model, term, 1.0)?;
                    drop(graph);
                    self.update(&g, lr, epoch)?;
                }
                for term in 0..2 {
                    let (pull, graph) = pull_loss(&mut self.model, &pull_in)?;
                    self.check_finite(epoch, "pull loss", pull.value)?;
                    if term == 0 {
                        pull_value = pull.value;
                    }
                    let g = graph.term_gradient(&self.model, term, w)?;
                    drop(graph);
                    self.update(&g, lr, epoch)?;
                }
                Ok(StepLosses { push: push_value, pull: pull_value })
            }
        }
    }

    /// Runs the next epoch and returns its mean losses.
    pub fn run_epoch(&mut self, sink: &mut dyn TelemetrySink) -> Result<EpochSummary> {
        let epoch = self.state.epoch + 1;
        let lr = self.lr_for_epoch(epoch);
        let order = self.epoch_order(epoch);
        let (mut sum_push, mut sum_pull) = (0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for (i, idx) in batches.iter().enumerate() {
            let pairs = self.make_pairs(epoch, idx)?;
            let losses = self.step(epoch, i, &pairs, lr)?;
            self.state.step += 1;
            let total = losses.push + self.config.pull_weight * losses.pull;
            sink.record(&StepRecord { step: self.state.step, epoch, push_loss: losses.push, pull_loss: losses.pull, total, lr });
            sum_push += losses.push;
            sum_pull += losses.pull;
        }
        sink.flush();
        let n = batches.len() as f64;
        let summary = EpochSummary {
            epoch,
            mean_push: sum_push / n,
            mean_pull: sum_pull / n,
            mean_total: (sum_push + self.config.pull_weight * sum_pull) / n,
            lr,
        };
        self.state.epoch = epoch;
        self.state.history.push(summary);
        log::info!(
            "epoch {epoch}/{}: push {:.6} pull {:.6} total {:.6} lr {lr:e}",
            self.config.epochs,
            summary.mean_push,
            summary.mean_pull,
            summary.mean_total
        );
        Ok(summary)
    }

    /// Writes the model and state; runs validation first when configured.
    pub fn checkpoint(&mut self, model_path: &Path, state_path: &Path) -> Result<()> {
        if let Some(dir) = self.config.val_dir.clone() {
            let report = evaluate(&self.model, &dir, &self.config.noise, self.config.seed, &EvalOptions::default())?;
            log::info!("validation after epoch {}: PSNR {:.2} dB", self.state.epoch, report.mean_psnr);
            if self.state.best_metric.is_none_or(|b| report.mean_psnr > b) {
                self.state.best_metric = Some(report.mean_psnr);
            }
        }
        save_checkpoint(&self.model, model_path)?;
        self.state.save(state_path)
    }

    /// Trains until `until_epoch` (capped at the configured budget).
    pub fn run_until(&mut self, until_epoch: usize, sink: &mut dyn TelemetrySink, plan: Option<&CheckpointPlan>) -> Result<()> {
        let last = until_epoch.min(self.config.epochs);
        while self.state.epoch < last {
            self.run_epoch(sink)?;
            if let Some(plan) = plan {
                let e = self.state.epoch;
                if plan.every > 0 && e % plan.every == 0 && e < self.config.epochs {
                    self.checkpoint(&plan.periodic_path(e), &plan.state_path())?;
                }
            }
        }
        if let Some(plan) = plan {
            self.checkpoint(&plan.model_out, &plan.state_path())?;
        }
        Ok(())
    }

    pub fn run(&mut self, sink: &mut dyn TelemetrySink, plan: Option<&CheckpointPlan>) -> Result<()> {
        self.run_until(self.config.epochs, sink, plan)
    }
}

/// Full run from a directory of clean PNGs; writes checkpoints to `model_out`.
pub fn train(config: TrainConfig, train_dir: &Path, model_out: &Path, sink: &mut dyn TelemetrySink) -> Result<DenoiserModel<f32>> {
    let every = config.checkpoint_every;
    let mut trainer = Trainer::from_dir(config, train_dir)?;
    let plan = CheckpointPlan { model_out: model_out.to_path_buf(), every };
    trainer.run(sink, Some(&plan))?;
    Ok(trainer.into_model())
}

/// Resumes from `model_path` and its state file, continuing to the budget.
pub fn resume_training(
    config: TrainConfig,
    train_dir: &Path,
    model_path: &Path,
    model_out: &Path,
    sink: &mut dyn TelemetrySink,
) -> Result<DenoiserModel<f32>> {
    let every = config.checkpoint_every;
    let model = load_checkpoint(model_path)?;
    let state = TrainState::load(&state_path_for(model_path))?;
    let patches = load_training_patches(train_dir, &config)?;
    let mut trainer = Trainer::resume(config, patches, model, state)?;
    let plan = CheckpointPlan { model_out: model_out.to_path_buf(), every };
    trainer.run(sink, Some(&plan))?;
    Ok(trainer.into_model())
}

/// Eval-mode prediction clamped to `[0, 1]`; `two_pass` applies the network twice.
pub fn denoise(model: &DenoiserModel<f32>, noisy: &ImageTensor, two_pass: bool) -> Result<ImageTensor> {
    if noisy.channels() != model.arch().in_channels {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} channels, image has {}",
            model.arch().in_channels,
            noisy.channels()
        )));
    }
    let mut out = model.infer(&Batch::from_image(noisy))?;
    if two_pass {
        out = model.infer(&out)?;
    }
    Ok(out.image(0)?.clamp01())
}
