//! Dense networks written from scratch: a plain MLP and the
//! hypernetwork-conditioned model whose output layer is emitted by a second
//! network from the signal-state vector.

mod adam;
mod checkpoint;
mod dense;
mod gradcheck;
mod hyper;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, ModelKind, RESHAPE_CONVENTION};
pub use dense::{Activation, Dense};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradCheckSample};
pub use hyper::{ForwardCache, HnFdnnModel, OutputLayer};
pub use mlp::{Mlp, MlpCache, MlpSpec};

/// Parameter gradients, one tensor per parameter tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like<T: Trainable + ?Sized>(model: &T) -> Self {
        Gradients { tensors: model.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for g in t.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Anything with a flat list of trainable `f64` tensors.
pub trait Trainable {
    fn param_tensors(&self) -> Vec<&[f64]>;
    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensors subject to weight decay, parallel to `param_tensors`.
    fn decay_mask(&self) -> Vec<bool> {
        vec![false; self.param_tensors().len()]
    }
}

/// A network mapping tap vectors to outputs under a conditioning vector.
/// The plain MLP ignores the condition.
pub trait ConditionedNet: Trainable + Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Row-major `batch x output_dim` outputs for a batch sharing `c`.
    fn predict(&self, inputs: &[f64], batch: usize, c: &[f64; 2]) -> crate::Result<Vec<f64>>;

    /// Adds the gradient of `sum ||out - target||^2` over the batch to
    /// `grads` and returns that loss.
    fn accumulate_gradients(
        &self,
        inputs: &[f64],
        batch: usize,
        c: &[f64; 2],
        targets: &[f64],
        grads: &mut Gradients,
    ) -> crate::Result<f64>;
}
