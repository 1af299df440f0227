use serde::{Deserialize, Serialize};

use super::dense::{Activation, Dense};
use super::{ConditionedNet, Gradients, Trainable};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Layer widths `D_1..D_G` (input first) and the hidden activation. The
/// output layer is always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation) -> Self {
        MlpSpec { layer_sizes, hidden_activation }
    }

    pub fn validate(&self, min_layers: usize) -> Result<()> {
        if self.layer_sizes.len() < min_layers {
            return Err(Error::Config(format!(
                "network needs at least {min_layers} layers, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero-width layer in {:?}", self.layer_sizes)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// `16-50-6-2` style rendering.
    pub fn describe(&self) -> String {
        self.layer_sizes.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Activations of every layer, input included, for one batch.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub batch: usize,
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds the input at least")
    }
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate(2)?;
        let layers = spec.layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Mlp { spec, layers })
    }

    /// Fan-based uniform init: He for ReLU hidden layers, Xavier otherwise;
    /// the output layer is Xavier scaled by `output_gain`.
    pub fn random(spec: MlpSpec, output_gain: f64, rng: &mut RngStream) -> Result<Self> {
        spec.validate(2)?;
        let count = spec.layer_sizes.len() - 1;
        let layers = spec
            .layer_sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i + 1 == count {
                    Dense::xavier(w[0], w[1], output_gain, rng)
                } else if spec.hidden_activation == Activation::Relu {
                    Dense::he(w[0], w[1], rng)
                } else {
                    Dense::xavier(w[0], w[1], 1.0, rng)
                }
            })
            .collect();
        Ok(Mlp { spec, layers })
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Linear
        } else {
            self.spec.hidden_activation
        }
    }

    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<MlpCache> {
        if input.len() != batch * self.spec.input_dim() {
            return Err(Error::dim(format!(
                "expected {batch} x {} inputs, got {} values",
                self.spec.input_dim(),
                input.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward_batch(acts.last().expect("nonempty"), batch, self.activation(i));
            acts.push(next);
        }
        Ok(MlpCache { batch, acts })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input, 1)?.acts.pop().expect("nonempty"))
    }

    /// Accumulates parameter gradients into `grads` (two tensors per layer,
    /// weights then bias) and returns the input gradient when requested.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        d_output: &[f64],
        grads: &mut [Vec<f64>],
        want_input_grad: bool,
    ) -> Result<Option<Vec<f64>>> {
        if cache.acts.len() != self.layers.len() + 1 || d_output.len() != cache.output().len() {
            return Err(Error::dim("cache does not belong to this network".to_string()));
        }
        let batch = cache.batch;
        let mut delta = d_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            let need = want_input_grad || i > 0;
            let d_in = self.layers[i].backward_batch(
                &cache.acts[i],
                &cache.acts[i + 1],
                &mut delta,
                batch,
                self.activation(i),
                &mut gw[0],
                &mut rest[0],
                need,
            );
            match d_in {
                Some(d) => delta = d,
                None => return Ok(None),
            }
        }
        Ok(Some(delta))
    }
}

impl Trainable for Mlp {
    fn param_tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl ConditionedNet for Mlp {
    fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn predict(&self, inputs: &[f64], batch: usize, _c: &[f64; 2]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(inputs, batch)?.acts.pop().expect("nonempty"))
    }

    fn accumulate_gradients(
        &self,
        inputs: &[f64],
        batch: usize,
        _c: &[f64; 2],
        targets: &[f64],
        grads: &mut Gradients,
    ) -> Result<f64> {
        let cache = self.forward_batch(inputs, batch)?;
        if targets.len() != cache.output().len() {
            return Err(Error::dim("target batch shape mismatch".to_string()));
        }
        let (loss, d_out) = squared_error(cache.output(), targets);
        self.backward_batch(&cache, &d_out, &mut grads.tensors, false)?;
        Ok(loss)
    }
}

/// `sum (y - t)^2` and its gradient `2 (y - t)`.
pub(crate) fn squared_error(output: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let d = output
        .iter()
        .zip(targets)
        .map(|(y, t)| {
            let e = y - t;
            loss += e * e;
            2.0 * e
        })
        .collect();
    (loss, d)
}
