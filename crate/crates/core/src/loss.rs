//! Push and pull losses over a batch of observation pairs.
//!
//! Push: `D1 = f(A1)`, `D2 = f(D1)`, loss `MSE(D1, B1) + MSE(D2, B2)` with the
//! constant targets `B1 = shift_up(A2)` and `B2 = jpeg(clamp(A2))`.
//! Pull: `MSE(f(up(A1)), f(down(A1))) + MSE(f(up(A2)), f(down(A2)))`.

use crate::degrade::{jpeg_decay, shift, JpegSpec, ShiftDirection, ShiftSpec};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::net::{batch_mse, batch_mse_grad, Batch, DenoiserModel, GradientTape, PassId, PassInput, Real};
use crate::noise::ObservationPair;
use crate::rng::RngStream;

/// Network input and constant targets of the push loss.
#[derive(Debug, Clone)]
pub struct PushInputs<T> {
    pub a1: Batch<T>,
    pub b1: Batch<T>,
    pub b2: Batch<T>,
    /// Per-sample shift drawn for `B1`.
    pub shift_k: Vec<usize>,
    /// Per-sample quality fraction drawn for `B2`.
    pub jpeg_p: Vec<f64>,
}

impl<T: Real> PushInputs<T> {
    /// Draws one shift and one quality per pair.
    pub fn draw(
        pairs: &[ObservationPair],
        shift_spec: &ShiftSpec,
        jpeg_spec: &JpegSpec,
        shift_rng: &mut RngStream,
        jpeg_rng: &mut RngStream,
    ) -> Result<Self> {
        let mut a1 = Vec::with_capacity(pairs.len());
        let mut b1 = Vec::with_capacity(pairs.len());
        let mut b2 = Vec::with_capacity(pairs.len());
        let mut shift_k = Vec::with_capacity(pairs.len());
        let mut jpeg_p = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let (shifted, k) = shift(&pair.a2, ShiftDirection::Up, shift_spec, shift_rng);
            let (decayed, p) = jpeg_decay(&pair.a2.clamp01(), jpeg_spec, jpeg_rng)?;
            a1.push(pair.a1.clone());
            b1.push(shifted);
            b2.push(decayed);
            shift_k.push(k);
            jpeg_p.push(p);
        }
        Ok(PushInputs {
            a1: Batch::from_images(&a1)?,
            b1: Batch::from_images(&b1)?,
            b2: Batch::from_images(&b2)?,
            shift_k,
            jpeg_p,
        })
    }

    pub fn from_parts(a1: Batch<T>, b1: Batch<T>, b2: Batch<T>) -> Result<Self> {
        if !a1.same_shape(&b1) || !a1.same_shape(&b2) {
            return Err(Error::ShapeMismatch(format!("push inputs {:?} {:?} {:?}", a1.dims(), b1.dims(), b2.dims())));
        }
        Ok(PushInputs { a1, b1, b2, shift_k: Vec::new(), jpeg_p: Vec::new() })
    }
}

/// The four shifted views fed to the network by the pull loss.
#[derive(Debug, Clone)]
pub struct PullInputs<T> {
    pub a1_up: Batch<T>,
    pub a1_down: Batch<T>,
    pub a2_up: Batch<T>,
    pub a2_down: Batch<T>,
    /// Per-sample shifts in view order `[a1_up, a1_down, a2_up, a2_down]`.
    pub shift_k: Vec<[usize; 4]>,
}

impl<T: Real> PullInputs<T> {
    /// Four independent shift draws per pair.
    pub fn draw(pairs: &[ObservationPair], shift_spec: &ShiftSpec, rng: &mut RngStream) -> Result<Self> {
        let mut views: [Vec<ImageTensor>; 4] = Default::default();
        let mut shift_k = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let mut ks = [0; 4];
            let sources = [(&pair.a1, ShiftDirection::Up), (&pair.a1, ShiftDirection::Down), (&pair.a2, ShiftDirection::Up), (&pair.a2, ShiftDirection::Down)];
            for (j, (img, dir)) in sources.into_iter().enumerate() {
                let (v, k) = shift(img, dir, shift_spec, rng);
                views[j].push(v);
                ks[j] = k;
            }
            shift_k.push(ks);
        }
        let [a, b, c, d] = views;
        Ok(PullInputs {
            a1_up: Batch::from_images(&a)?,
            a1_down: Batch::from_images(&b)?,
            a2_up: Batch::from_images(&c)?,
            a2_down: Batch::from_images(&d)?,
            shift_k,
        })
    }

    pub fn from_parts(a1_up: Batch<T>, a1_down: Batch<T>, a2_up: Batch<T>, a2_down: Batch<T>) -> Result<Self> {
        if !a1_up.same_shape(&a1_down) || !a2_up.same_shape(&a2_down) {
            return Err(Error::ShapeMismatch("pull views differ in shape".into()));
        }
        Ok(PullInputs { a1_up, a1_down, a2_up, a2_down, shift_k: Vec::new() })
    }
}

#[derive(Debug, Clone)]
pub struct PushTerms<T> {
    pub b1: Batch<T>,
    pub b2: Batch<T>,
    pub d1: Batch<T>,
    pub d2: Batch<T>,
    pub mse_first: f64,
    pub mse_second: f64,
    /// `mse_first + mse_second`.
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct PullTerms<T> {
    pub mo1: Batch<T>,
    pub mo2: Batch<T>,
    pub no1: Batch<T>,
    pub no2: Batch<T>,
    pub mse_a1: f64,
    pub mse_a2: f64,
    /// `mse_a1 + mse_a2`.
    pub value: f64,
}

/// Recorded passes plus the loss derivative with respect to each output.
/// Each seed belongs to one of the loss's two squared-error terms.
pub struct LossGraph<T> {
    tape: GradientTape<T>,
    seeds: Vec<(PassId, Batch<T>)>,
    term_of_seed: Vec<usize>,
}

impl<T: Real> LossGraph<T> {
    /// Parameter gradient of `weight * loss`, full layout length.
    pub fn gradient(&self, model: &DenoiserModel<T>, weight: f64) -> Result<Vec<T>> {
        Ok(scaled(model.backward(&self.tape, &self.seeds)?, weight))
    }

    /// Gradient of `weight *` term `term` (0 or 1) alone.
    pub fn term_gradient(&self, model: &DenoiserModel<T>, term: usize, weight: f64) -> Result<Vec<T>> {
        let seeds: Vec<(PassId, Batch<T>)> = self
            .seeds
            .iter()
            .zip(&self.term_of_seed)
            .filter(|(_, &t)| t == term)
            .map(|(s, _)| s.clone())
            .collect();
        Ok(scaled(model.backward(&self.tape, &seeds)?, weight))
    }

    pub fn tape(&self) -> &GradientTape<T> {
        &self.tape
    }
}

/// Records `f(A1)` and `f(f(A1))` on a fresh tape. With `detach_inner` the
/// second application sees `D1` as a constant input.
pub fn push_loss<T: Real>(model: &mut DenoiserModel<T>, inputs: &PushInputs<T>, detach_inner: bool) -> Result<(PushTerms<T>, LossGraph<T>)> {
    let mut tape = model.tape();
    let first = model.forward_taped(&mut tape, PassInput::Data(&inputs.a1))?;
    let inner = if detach_inner { PassInput::Detached(first) } else { PassInput::Output(first) };
    let second = model.forward_taped(&mut tape, inner)?;
    let d1 = tape.output(first).clone();
    let d2 = tape.output(second).clone();
    let mse_first = batch_mse(&d1, &inputs.b1)?;
    let mse_second = batch_mse(&d2, &inputs.b2)?;
    let seeds = vec![(first, batch_mse_grad(&d1, &inputs.b1, 1.0)?), (second, batch_mse_grad(&d2, &inputs.b2, 1.0)?)];
    let terms = PushTerms {
        b1: inputs.b1.clone(),
        b2: inputs.b2.clone(),
        d1,
        d2,
        mse_first,
        mse_second,
        value: mse_first + mse_second,
    };
    Ok((terms, LossGraph { tape, seeds, term_of_seed: vec![0, 1] }))
}

/// Records the four shifted-view passes; gradients flow through all of them.
pub fn pull_loss<T: Real>(model: &mut DenoiserModel<T>, inputs: &PullInputs<T>) -> Result<(PullTerms<T>, LossGraph<T>)> {
    let mut tape = model.tape();
    let ids = [
        model.forward_taped(&mut tape, PassInput::Data(&inputs.a1_up))?,
        model.forward_taped(&mut tape, PassInput::Data(&inputs.a1_down))?,
        model.forward_taped(&mut tape, PassInput::Data(&inputs.a2_up))?,
        model.forward_taped(&mut tape, PassInput::Data(&inputs.a2_down))?,
    ];
    let [mo1, mo2, no1, no2] = ids.map(|id| tape.output(id).clone());
    let mse_a1 = batch_mse(&mo1, &mo2)?;
    let mse_a2 = batch_mse(&no1, &no2)?;
    let ga = batch_mse_grad(&mo1, &mo2, 1.0)?;
    let gb = batch_mse_grad(&no1, &no2, 1.0)?;
    let seeds = vec![
        (ids[0], ga.clone()),
        (ids[1], negate(ga)),
        (ids[2], gb.clone()),
        (ids[3], negate(gb)),
    ];
    let terms = PullTerms { mo1, mo2, no1, no2, mse_a1, mse_a2, value: mse_a1 + mse_a2 };
    Ok((terms, LossGraph { tape, seeds, term_of_seed: vec![0, 0, 1, 1] }))
}

fn scaled<T: Real>(mut g: Vec<T>, weight: f64) -> Vec<T> {
    if weight != 1.0 {
        let w = T::of(weight);
        g.iter_mut().for_each(|v| *v *= w);
    }
    g
}

fn negate<T: Real>(mut b: Batch<T>) -> Batch<T> {
    b.data_mut().iter_mut().for_each(|v| *v = -*v);
    b
}

/// Unweighted objective minimized per step.
pub fn total_step_loss<T>(push: &PushTerms<T>, pull: &PullTerms<T>) -> f64 {
    push.value + pull.value
}

/// `push + pull_weight * pull`.
pub fn weighted_step_loss<T>(push: &PushTerms<T>, pull: &PullTerms<T>, pull_weight: f64) -> f64 {
    push.value + pull_weight * pull.value
}
