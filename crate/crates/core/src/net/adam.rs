use crate::error::{Error, Result};

use super::{DenoiserModel, Real};

/// Adam moments for the trainable slots, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(trainable_len: usize) -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; trainable_len], v: vec![0.0; trainable_len] }
    }

    pub fn for_model<T: Real>(model: &DenoiserModel<T>) -> Self {
        AdamState::new(model.trainable_len())
    }
}

/// One bias-corrected Adam step on the trainable parameters. `grads` must span
/// the full parameter layout; running-statistic slots are left untouched.
pub fn apply_update<T: Real>(model: &mut DenoiserModel<T>, grads: &[T], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != model.len() {
        return Err(Error::LengthMismatch { expected: model.len(), actual: grads.len() });
    }
    let n = model.trainable_len();
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: state.m.len().min(state.v.len()) });
    }
    if let Some(bad) = grads[..n].iter().position(|g| !g.as_f64().is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite gradient at slot {bad}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let params = model.params_vec_mut();
    for i in 0..n {
        let g = grads[i].as_f64();
        let m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let step = lr * (m / c1) / ((v / c2).sqrt() + state.eps);
        params[i] = T::of(params[i].as_f64() - step);
    }
    model.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ArchConfig;

    fn small() -> DenoiserModel<f64> {
        let arch = ArchConfig { depth: 3, width: 4, in_channels: 1, out_channels: 1, use_batch_norm: true };
        DenoiserModel::zeroed(arch).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut model = small();
        let before = model.params().to_vec();
        let mut grads = vec![0.0; model.len()];
        grads[0] = 3.0;
        grads[1] = -0.5;
        let last = model.len() - 1;
        grads[last] = 7.0;
        let mut st = AdamState::for_model(&model);
        apply_update(&mut model, &grads, &mut st, 0.01).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((model.params()[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((model.params()[1] - (before[1] + 0.01)).abs() < 1e-9);
        assert_eq!(model.params()[2], before[2]);
        assert_eq!(model.params()[last], before[last], "running stats are not trainable");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut model = small();
        let mut st = AdamState::for_model(&model);
        let short = vec![0.0; model.trainable_len()];
        let err = apply_update(&mut model, &short, &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
        let mut wrong = AdamState::new(3);
        let zeros = vec![0.0; model.len()];
        let err = apply_update(&mut model, &zeros, &mut wrong, 0.1).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }

    #[test]
    fn update_invalidates_tapes() {
        let mut model = small();
        let tape = model.tape();
        let mut st = AdamState::for_model(&model);
        let zeros = vec![0.0; model.len()];
        apply_update(&mut model, &zeros, &mut st, 0.1).unwrap();
        assert!(matches!(model.backward(&tape, &[]), Err(Error::StaleTape)));
    }
}
