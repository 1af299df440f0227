use super::dense::{affine_backward, affine_into, Activation, Dense};
use super::mlp::{squared_error, Mlp, MlpCache, MlpSpec};
use super::{ConditionedNet, Gradients, Trainable};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Main network whose output layer `(W_G(c), b_G(c))` is produced by a
/// hypernetwork from the conditioning vector `c`. Only the hidden layers of
/// the main network and the hypernetwork itself hold trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HnFdnnModel {
    pub main_spec: MlpSpec,
    /// Layers 2..G-1 of the main network.
    pub trunk: Vec<Dense>,
    pub hn: Mlp,
}

/// Output layer emitted by the hypernetwork for one conditioning vector.
/// The hypernetwork output is read row-major: weights first, then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl OutputLayer {
    fn from_hn_output(v: &[f64], in_dim: usize, out_dim: usize) -> Self {
        let split = in_dim * out_dim;
        OutputLayer { in_dim, out_dim, weights: v[..split].to_vec(), bias: v[split..].to_vec() }
    }
}

/// Everything `backward` needs from a single-sample forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    trunk_acts: Vec<Vec<f64>>,
    hn: MlpCache,
    layer: OutputLayer,
    fingerprint: f64,
}

impl HnFdnnModel {
    /// Required hypernetwork output width `D_G * D_{G-1} + D_G`.
    pub fn hn_output_dim(main_spec: &MlpSpec) -> usize {
        let g = main_spec.layer_sizes.len();
        let (d_last, d_prev) = (main_spec.layer_sizes[g - 1], main_spec.layer_sizes[g - 2]);
        d_last * d_prev + d_last
    }

    fn check_specs(main_spec: &MlpSpec, hn_spec: &MlpSpec) -> Result<()> {
        main_spec.validate(3)?;
        hn_spec.validate(2)?;
        if hn_spec.input_dim() != 2 {
            return Err(Error::Config(format!(
                "hypernetwork input must be the 2-element state vector, got {}",
                hn_spec.input_dim()
            )));
        }
        let need = Self::hn_output_dim(main_spec);
        if hn_spec.output_dim() != need {
            return Err(Error::Config(format!(
                "hypernetwork {} must emit {need} values for main network {}",
                hn_spec.describe(),
                main_spec.describe()
            )));
        }
        Ok(())
    }

    pub fn zeros(main_spec: MlpSpec, hn_spec: MlpSpec) -> Result<Self> {
        Self::check_specs(&main_spec, &hn_spec)?;
        let g = main_spec.layer_sizes.len();
        let trunk = main_spec.layer_sizes[..g - 1].windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(HnFdnnModel { trunk, hn: Mlp::zeros(hn_spec)?, main_spec })
    }

    /// Xavier trunk; hypernetwork with a small final layer and zero bias so
    /// the emitted output layer starts close to zero.
    pub fn random(main_spec: MlpSpec, hn_spec: MlpSpec, rng: &mut RngStream) -> Result<Self> {
        Self::check_specs(&main_spec, &hn_spec)?;
        let g = main_spec.layer_sizes.len();
        let trunk = main_spec.layer_sizes[..g - 1]
            .windows(2)
            .map(|w| Dense::xavier(w[0], w[1], 1.0, rng))
            .collect();
        let hn = Mlp::random(hn_spec, 0.01, rng)?;
        Ok(HnFdnnModel { trunk, hn, main_spec })
    }

    pub fn hn_spec(&self) -> &MlpSpec {
        &self.hn.spec
    }

    fn hidden_dim(&self) -> usize {
        let g = self.main_spec.layer_sizes.len();
        self.main_spec.layer_sizes[g - 2]
    }

    fn hidden_activation(&self) -> Activation {
        self.main_spec.hidden_activation
    }

    fn emit(&self, c: &[f64; 2]) -> Result<(OutputLayer, MlpCache)> {
        let cache = self.hn.forward_batch(c, 1)?;
        let layer = OutputLayer::from_hn_output(cache.output(), self.hidden_dim(), self.main_spec.output_dim());
        Ok((layer, cache))
    }

    /// Output layer for `c`; only needs recomputing when the state changes.
    pub fn output_layer(&self, c: &[f64; 2]) -> Result<OutputLayer> {
        Ok(self.emit(c)?.0)
    }

    fn trunk_forward(&self, input: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        if input.len() != batch * self.main_spec.input_dim() {
            return Err(Error::dim(format!(
                "expected {batch} x {} inputs, got {} values",
                self.main_spec.input_dim(),
                input.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.trunk.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.trunk {
            let next = layer.forward_batch(acts.last().expect("nonempty"), batch, self.hidden_activation());
            acts.push(next);
        }
        Ok(acts)
    }

    fn apply_output(layer: &OutputLayer, hidden: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * layer.out_dim];
        affine_into(&layer.weights, &layer.bias, layer.in_dim, layer.out_dim, hidden, batch, Activation::Linear, &mut out);
        out
    }

    /// Batch forward with a precomputed output layer.
    pub fn forward_with(&self, layer: &OutputLayer, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        if layer.in_dim != self.hidden_dim() || layer.out_dim != self.main_spec.output_dim() {
            return Err(Error::dim("output layer does not fit this network".to_string()));
        }
        let acts = self.trunk_forward(input, batch)?;
        Ok(Self::apply_output(layer, acts.last().expect("nonempty"), batch))
    }

    /// Single-sample forward pass `z_1, c -> z_G`.
    pub fn forward(&self, z1: &[f64], c: &[f64; 2]) -> Result<(Vec<f64>, ForwardCache)> {
        let (layer, hn) = self.emit(c)?;
        let trunk_acts = self.trunk_forward(z1, 1)?;
        let out = Self::apply_output(&layer, trunk_acts.last().expect("nonempty"), 1);
        Ok((out, ForwardCache { trunk_acts, hn, layer, fingerprint: self.fingerprint() }))
    }

    /// Exact gradients of a loss with `dL/dz_G = d_out` for the sample in `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<Gradients> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::invalid("stale forward cache: parameters changed since the forward pass"));
        }
        if d_out.len() != self.main_spec.output_dim() {
            return Err(Error::dim("upstream gradient has the wrong length".to_string()));
        }
        let mut grads = Gradients::zeros_like(self);
        self.backprop(&cache.trunk_acts, &cache.hn, &cache.layer, d_out, 1, &mut grads)?;
        Ok(grads)
    }

    fn backprop(
        &self,
        trunk_acts: &[Vec<f64>],
        hn_cache: &MlpCache,
        layer: &OutputLayer,
        d_out: &[f64],
        batch: usize,
        grads: &mut Gradients,
    ) -> Result<()> {
        // dL/dW_G = sum_b d_out[b] z_{G-1}[b]^T, dL/db_G = sum_b d_out[b];
        // these are gradients w.r.t. hypernetwork outputs, not parameters.
        let mut d_hn_out = vec![0.0; layer.weights.len() + layer.bias.len()];
        let (d_w, d_b) = d_hn_out.split_at_mut(layer.weights.len());
        let mut d_out_copy = d_out.to_vec();
        let d_hidden = affine_backward(
            &layer.weights,
            layer.in_dim,
            layer.out_dim,
            trunk_acts.last().expect("nonempty"),
            &[],
            &mut d_out_copy,
            batch,
            Activation::Linear,
            d_w,
            d_b,
            true,
        )
        .expect("input gradient requested");

        let n_trunk = self.trunk.len();
        let (trunk_grads, hn_grads) = grads.tensors.split_at_mut(2 * n_trunk);
        let mut delta = d_hidden;
        for i in (0..n_trunk).rev() {
            let (gw, rest) = trunk_grads[2 * i..].split_at_mut(1);
            let d_in = self.trunk[i].backward_batch(
                &trunk_acts[i],
                &trunk_acts[i + 1],
                &mut delta,
                batch,
                self.hidden_activation(),
                &mut gw[0],
                &mut rest[0],
                i > 0,
            );
            match d_in {
                Some(d) => delta = d,
                None => break,
            }
        }
        self.hn.backward_batch(hn_cache, &d_hn_out, hn_grads, false)?;
        Ok(())
    }

    fn fingerprint(&self) -> f64 {
        self.param_tensors()
            .iter()
            .flat_map(|t| t.iter())
            .enumerate()
            .map(|(i, v)| v * (1.0 + (i % 97) as f64 * 1e-3))
            .sum()
    }
}

impl Trainable for HnFdnnModel {
    fn param_tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> =
            self.trunk.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect();
        v.extend(self.hn.param_tensors());
        v
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self
            .trunk
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect();
        v.extend(self.hn.param_tensors_mut());
        v
    }

    /// Hypernetwork weight matrices only.
    fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; 2 * self.trunk.len()];
        m.extend((0..self.hn.layers.len()).flat_map(|_| [true, false]));
        m
    }
}

impl ConditionedNet for HnFdnnModel {
    fn input_dim(&self) -> usize {
        self.main_spec.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.main_spec.output_dim()
    }

    fn predict(&self, inputs: &[f64], batch: usize, c: &[f64; 2]) -> Result<Vec<f64>> {
        let layer = self.output_layer(c)?;
        self.forward_with(&layer, inputs, batch)
    }

    fn accumulate_gradients(
        &self,
        inputs: &[f64],
        batch: usize,
        c: &[f64; 2],
        targets: &[f64],
        grads: &mut Gradients,
    ) -> Result<f64> {
        let (layer, hn_cache) = self.emit(c)?;
        let acts = self.trunk_forward(inputs, batch)?;
        let out = Self::apply_output(&layer, acts.last().expect("nonempty"), batch);
        if targets.len() != out.len() {
            return Err(Error::dim("target batch shape mismatch".to_string()));
        }
        let (loss, d_out) = squared_error(&out, targets);
        self.backprop(&acts, &hn_cache, &layer, &d_out, batch, grads)?;
        Ok(loss)
    }
}
