use crate::error::{Error, Result};

use super::kernels::{bn_backward, conv_backward, BnCache};
use super::{Batch, DenoiserModel, Real, Trace};

/// Handle to a recorded forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PassId(usize);

impl PassId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where a recorded pass takes its input from.
#[derive(Debug, Clone, Copy)]
pub enum PassInput<'a, T> {
    /// External data; its gradient is reported by [`DenoiserModel::backward_full`].
    Data(&'a Batch<T>),
    /// Output of an earlier pass; gradients flow back into it.
    Output(PassId),
    /// Output of an earlier pass, treated as a constant.
    Detached(PassId),
}

struct PassRecord<T> {
    input: Batch<T>,
    source: Option<usize>,
    trace: Trace<T>,
}

/// Recorded forward passes of one model at one parameter version.
pub struct GradientTape<T> {
    version: u64,
    passes: Vec<PassRecord<T>>,
}

impl<T: Real> GradientTape<T> {
    pub fn len(&self) -> usize {
        self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passes.is_empty()
    }

    pub fn output(&self, id: PassId) -> &Batch<T> {
        self.passes[id.0].trace.acts.last().expect("recorded pass has layers")
    }

    fn get(&self, id: PassId) -> Result<&PassRecord<T>> {
        self.passes.get(id.0).ok_or_else(|| Error::InvalidArgument(format!("unknown pass {}", id.0)))
    }
}

/// Parameter gradient (full layout length, running-stat slots zero) plus the
/// gradient with respect to each data-fed pass input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<T>,
    /// Indexed by pass; `Some` for data-fed or detached passes reached by a seed.
    pub inputs: Vec<Option<Batch<T>>>,
}

impl<T: Real> DenoiserModel<T> {
    pub fn tape(&self) -> GradientTape<T> {
        GradientTape { version: self.version, passes: Vec::new() }
    }

    fn check_tape(&self, tape: &GradientTape<T>) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        Ok(())
    }

    /// Records a forward pass in the current mode. Train mode also updates the
    /// BN running statistics, which does not invalidate the tape.
    pub fn forward_taped(&mut self, tape: &mut GradientTape<T>, input: PassInput<'_, T>) -> Result<PassId> {
        self.check_tape(tape)?;
        let (x, source) = match input {
            PassInput::Data(x) => (x.clone(), None),
            PassInput::Output(id) => (tape.get(id)?.trace.acts.last().expect("recorded pass has layers").clone(), Some(id.0)),
            PassInput::Detached(id) => (tape.get(id)?.trace.acts.last().expect("recorded pass has layers").clone(), None),
        };
        let (trace, stats) = self.trace(&x, self.mode, true)?;
        self.update_running_stats(&stats);
        tape.passes.push(PassRecord { input: x, source, trace });
        Ok(PassId(tape.passes.len() - 1))
    }

    /// Parameter gradient of `sum_i <seed_i, output(pass_i)>`.
    pub fn backward(&self, tape: &GradientTape<T>, seeds: &[(PassId, Batch<T>)]) -> Result<Vec<T>> {
        Ok(self.backward_impl(tape, seeds, false)?.params)
    }

    /// Like [`backward`](Self::backward) but also returns input gradients.
    pub fn backward_full(&self, tape: &GradientTape<T>, seeds: &[(PassId, Batch<T>)]) -> Result<Gradients<T>> {
        self.backward_impl(tape, seeds, true)
    }

    fn backward_impl(&self, tape: &GradientTape<T>, seeds: &[(PassId, Batch<T>)], want_inputs: bool) -> Result<Gradients<T>> {
        self.check_tape(tape)?;
        let mut pending: Vec<Option<Batch<T>>> = (0..tape.len()).map(|_| None).collect();
        for (id, g) in seeds {
            let rec = tape.get(*id)?;
            let out = rec.trace.acts.last().expect("recorded pass has layers");
            if !out.same_shape(g) {
                return Err(Error::ShapeMismatch(format!("seed {:?} for output {:?}", g.dims(), out.dims())));
            }
            match pending[id.0].as_mut() {
                Some(acc) => acc.add_assign(g)?,
                None => pending[id.0] = Some(g.clone()),
            }
        }
        let mut grads = vec![T::zero(); self.params.len()];
        let mut inputs: Vec<Option<Batch<T>>> = (0..tape.len()).map(|_| None).collect();
        for i in (0..tape.len()).rev() {
            let Some(g) = pending[i].take() else { continue };
            let rec = &tape.passes[i];
            let need_dx = rec.source.is_some() || want_inputs;
            let dx = self.backward_pass(rec, g, need_dx, &mut grads);
            match (rec.source, dx) {
                (Some(src), Some(dx)) => match pending[src].as_mut() {
                    Some(acc) => acc.add_assign(&dx)?,
                    None => pending[src] = Some(dx),
                },
                (None, dx) => inputs[i] = dx,
                _ => {}
            }
        }
        Ok(Gradients { params: grads, inputs })
    }

    fn backward_pass(&self, rec: &PassRecord<T>, mut g: Batch<T>, need_dx: bool, grads: &mut [T]) -> Option<Batch<T>> {
        let layers = self.layout.layers();
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            if layer.relu {
                for (gv, &a) in g.data_mut().iter_mut().zip(rec.trace.acts[l].data()) {
                    if a <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            if let Some(bn) = layer.bn {
                let cache: &BnCache<T> = rec.trace.bn[l].as_ref().expect("bn layer recorded");
                let c = layer.cout;
                let gamma = &self.params[bn.gamma..bn.gamma + c];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                bn_backward(g.data_mut(), cache, gamma, &mut dgamma, &mut dbeta);
                for ch in 0..c {
                    grads[bn.gamma + ch] += dgamma[ch];
                    grads[bn.beta + ch] += dbeta[ch];
                }
            }
            let input = if l == 0 { &rec.input } else { &rec.trace.acts[l - 1] };
            let nw = 9 * layer.cin * layer.cout;
            let weight = &self.params[layer.weight..layer.weight + nw];
            let cg = conv_backward(input, weight, &g, l > 0 || need_dx);
            for (a, b) in grads[layer.weight..layer.weight + nw].iter_mut().zip(&cg.dw) {
                *a += *b;
            }
            for (a, b) in grads[layer.bias..layer.bias + layer.cout].iter_mut().zip(&cg.db) {
                *a += *b;
            }
            match cg.dx {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }
}
