//! Convolutional denoiser with a hand-written reverse-mode engine.

mod adam;
mod batch;
mod checkpoint;
mod kernels;
mod real;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngStream;

pub use adam::{apply_update, AdamState};
pub use batch::{batch_mse, batch_mse_grad, Batch};
pub use checkpoint::{load_checkpoint, model_from_bytes, model_to_bytes, save_checkpoint, CHECKPOINT_VERSION};
pub use real::Real;
pub use tape::{GradientTape, Gradients, PassId, PassInput};

use kernels::{bn_eval_forward, bn_train_forward, conv_forward, BnCache, BnStats};

/// Running statistics momentum: `running = (1 - m) running + m batch`.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub depth: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub use_batch_norm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { depth: 17, width: 64, in_channels: 3, out_channels: 3, use_batch_norm: true }
    }
}

impl ArchConfig {
    /// Reduced model sized for single-core training runs, without batch norm.
    pub fn desk_scale(channels: usize) -> Self {
        ArchConfig { depth: 8, width: 32, in_channels: channels, out_channels: channels, use_batch_norm: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::InvalidArch(format!("depth must be >= 3, got {}", self.depth)));
        }
        if self.width == 0 {
            return Err(Error::InvalidArch("width must be >= 1".into()));
        }
        for c in [self.in_channels, self.out_channels] {
            if c != 1 && c != 3 {
                return Err(Error::InvalidArch(format!("channels must be 1 or 3, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BnSlots {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
    pub bn: Option<BnSlots>,
    pub relu: bool,
}

/// Offsets of every tensor in the flat parameter vector. Trainable tensors
/// (weights, biases, BN scale and shift) come first in layer order, followed by
/// the running statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    layers: Vec<LayerSlots>,
    trainable: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(arch.depth);
        for l in 0..arch.depth {
            let cin = if l == 0 { arch.in_channels } else { arch.width };
            let last = l + 1 == arch.depth;
            let cout = if last { arch.out_channels } else { arch.width };
            let weight = offset;
            offset += 9 * cin * cout;
            let bias = offset;
            offset += cout;
            let bn = (arch.use_batch_norm && l > 0 && !last).then(|| {
                let s = BnSlots { gamma: offset, beta: offset + cout, mean: 0, var: 0 };
                offset += 2 * cout;
                s
            });
            layers.push(LayerSlots { cin, cout, weight, bias, bn, relu: !last });
        }
        let trainable = offset;
        for layer in &mut layers {
            if let Some(bn) = layer.bn.as_mut() {
                bn.mean = offset;
                bn.var = offset + layer.cout;
                offset += 2 * layer.cout;
            }
        }
        ParamLayout { layers, trainable, total: offset }
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn layers(&self) -> &[LayerSlots] {
        &self.layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and updates the running estimates.
    Train,
    /// Batch-norm uses the running estimates.
    Eval,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Prediction of the clean image (not of the noise).
#[derive(Debug, Clone)]
pub struct DenoiserModel<T: Real = f32> {
    arch: ArchConfig,
    layout: ParamLayout,
    params: Vec<T>,
    mode: Mode,
    version: u64,
}

impl<T: Real> PartialEq for DenoiserModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

/// Output of one forward pass, optionally with everything backward needs.
pub(crate) struct Trace<T> {
    /// Post-activation output of every layer; the last one is the network output.
    pub acts: Vec<Batch<T>>,
    pub bn: Vec<Option<BnCache<T>>>,
}

impl<T: Real> DenoiserModel<T> {
    pub fn new(arch: ArchConfig, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(&arch);
        if params.len() != layout.total_len() {
            return Err(Error::LengthMismatch { expected: layout.total_len(), actual: params.len() });
        }
        Ok(DenoiserModel { arch, layout, params, mode: Mode::Train, version: fresh_version() })
    }

    /// Every parameter zero except BN scale and running variance, which are one.
    pub fn zeroed(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(&arch);
        let mut params = vec![T::zero(); layout.total_len()];
        for bn in layout.layers().iter().filter_map(|l| l.bn.map(|b| (b, l.cout))) {
            let (slots, c) = bn;
            params[slots.gamma..slots.gamma + c].fill(T::one());
            params[slots.var..slots.var + c].fill(T::one());
        }
        DenoiserModel::new(arch, params)
    }

    /// He-normal conv weights (`std = sqrt(2 / (9 cin))`); biases and BN shift
    /// zero, BN scale one.
    pub fn init(arch: ArchConfig, rng: &mut RngStream) -> Result<Self> {
        let mut model = DenoiserModel::zeroed(arch)?;
        for layer in model.layout.layers.clone() {
            let std = (2.0 / (9 * layer.cin) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArch(e.to_string()))?;
            for p in &mut model.params[layer.weight..layer.weight + 9 * layer.cin * layer.cout] {
                *p = T::of(normal.sample(rng));
            }
        }
        Ok(model)
    }

    /// A network that reproduces any non-negative input exactly: every conv
    /// passes its first `in_channels` channels through the kernel centre.
    pub fn identity(arch: ArchConfig) -> Result<Self> {
        if arch.use_batch_norm || arch.width < arch.in_channels || arch.in_channels != arch.out_channels {
            return Err(Error::InvalidArch("identity needs no batch-norm, width >= channels and in == out".into()));
        }
        let mut model = DenoiserModel::zeroed(arch)?;
        for layer in model.layout.layers.clone() {
            for ch in 0..arch.in_channels {
                // kernel centre is tap 4 of the 3x3 grid
                model.params[layer.weight + (4 * layer.cin + ch) * layer.cout + ch] = T::one();
            }
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable access invalidates every outstanding tape.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_len(&self) -> usize {
        self.layout.trainable_len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn set_train(&mut self, train: bool) {
        self.mode = if train { Mode::Train } else { Mode::Eval };
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version = fresh_version();
    }

    pub(crate) fn params_vec_mut(&mut self) -> &mut Vec<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            arch: self.arch,
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::of(p.as_f64())).collect(),
            mode: self.mode,
            version: fresh_version(),
        }
    }

    fn check_input(&self, x: &Batch<T>) -> Result<()> {
        let (n, h, w, c) = x.dims();
        if c != self.arch.in_channels || n == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "model expects N x H x W x {} input, got {:?}",
                self.arch.in_channels,
                x.dims()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &Batch<T>, mode: Mode, record: bool) -> Result<(Trace<T>, Vec<BnStats>)> {
        self.check_input(x)?;
        let p = &self.params;
        let mut acts: Vec<Batch<T>> = Vec::with_capacity(self.layout.num_layers());
        let mut bn_caches = Vec::with_capacity(self.layout.num_layers());
        let mut stats = Vec::new();
        for layer in self.layout.layers() {
            let input = acts.last().unwrap_or(x);
            let weight = &p[layer.weight..layer.weight + 9 * layer.cin * layer.cout];
            let bias = &p[layer.bias..layer.bias + layer.cout];
            let mut y = conv_forward(input, weight, bias);
            let cache = match layer.bn {
                Some(bn) => {
                    let c = layer.cout;
                    let gamma = &p[bn.gamma..bn.gamma + c];
                    let beta = &p[bn.beta..bn.beta + c];
                    match mode {
                        Mode::Train => {
                            let (cache, s) = bn_train_forward(y.data_mut(), gamma, beta);
                            stats.push(s);
                            Some(cache)
                        }
                        Mode::Eval => {
                            let mean = &p[bn.mean..bn.mean + c];
                            let var = &p[bn.var..bn.var + c];
                            Some(bn_eval_forward(y.data_mut(), gamma, beta, mean, var))
                        }
                    }
                }
                None => None,
            };
            if layer.relu {
                for v in y.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            if !record {
                // only the previous activation is needed
                acts.clear();
            }
            acts.push(y);
            bn_caches.push(if record { cache } else { None });
        }
        Ok((Trace { acts, bn: bn_caches }, stats))
    }

    fn update_running_stats(&mut self, stats: &[BnStats]) {
        let m = BN_MOMENTUM;
        let bn_layers: Vec<(BnSlots, usize)> =
            self.layout.layers().iter().filter_map(|l| l.bn.map(|b| (b, l.cout))).collect();
        for ((slots, c), s) in bn_layers.into_iter().zip(stats) {
            for ch in 0..c {
                let rm = &mut self.params[slots.mean + ch];
                *rm = T::of((1.0 - m) * rm.as_f64() + m * s.mean[ch]);
                let rv = &mut self.params[slots.var + ch];
                *rv = T::of((1.0 - m) * rv.as_f64() + m * s.var_unbiased[ch]);
            }
        }
    }

    /// Forward pass in the current mode. In train mode the BN running
    /// statistics move toward the batch statistics.
    pub fn forward(&mut self, x: &Batch<T>) -> Result<Batch<T>> {
        let (mut trace, stats) = self.trace(x, self.mode, false)?;
        self.update_running_stats(&stats);
        Ok(trace.acts.pop().expect("depth >= 3"))
    }

    /// Eval-mode forward pass; never mutates the model.
    pub fn infer(&self, x: &Batch<T>) -> Result<Batch<T>> {
        let (mut trace, _) = self.trace(x, Mode::Eval, false)?;
        Ok(trace.acts.pop().expect("depth >= 3"))
    }

    /// Eval-mode prediction for a single image.
    pub fn infer_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.infer(&Batch::from_image(img))?.image(0)
    }
}
