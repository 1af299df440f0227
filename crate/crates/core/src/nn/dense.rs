use serde::{Deserialize, Serialize};

use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Fully connected layer, `weights` row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform weights in `[-limit, limit]` with `limit = gain * sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(in_dim: usize, out_dim: usize, gain: f64, rng: &mut RngStream) -> Self {
        let limit = gain * (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut d = Dense::zeros(in_dim, out_dim);
        for w in &mut d.weights {
            *w = (2.0 * rng.uniform() - 1.0) * limit;
        }
        d
    }

    /// Uniform weights with `limit = sqrt(6 / fan_in)`, suited to ReLU.
    pub fn he(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let mut d = Dense::zeros(in_dim, out_dim);
        for w in &mut d.weights {
            *w = (2.0 * rng.uniform() - 1.0) * limit;
        }
        d
    }

    /// `out = act(W x + b)` for each row of a row-major batch.
    pub fn forward_batch(&self, input: &[f64], batch: usize, act: Activation) -> Vec<f64> {
        debug_assert_eq!(input.len(), batch * self.in_dim);
        let mut out = vec![0.0; batch * self.out_dim];
        affine_into(&self.weights, &self.bias, self.in_dim, self.out_dim, input, batch, act, &mut out);
        out
    }

    /// Backpropagates `d_out` (gradient w.r.t. this layer's activated
    /// output, overwritten with the pre-activation gradient). Accumulates
    /// parameter gradients and optionally returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch(
        &self,
        input: &[f64],
        output: &[f64],
        d_out: &mut [f64],
        batch: usize,
        act: Activation,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        affine_backward(
            &self.weights,
            self.in_dim,
            self.out_dim,
            input,
            output,
            d_out,
            batch,
            act,
            grad_w,
            grad_b,
            want_input_grad,
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_into(
    weights: &[f64],
    bias: &[f64],
    in_dim: usize,
    out_dim: usize,
    input: &[f64],
    batch: usize,
    act: Activation,
    out: &mut [f64],
) {
    for b in 0..batch {
        let x = &input[b * in_dim..(b + 1) * in_dim];
        let row_out = &mut out[b * out_dim..(b + 1) * out_dim];
        for (o, y) in row_out.iter_mut().enumerate() {
            let w = &weights[o * in_dim..(o + 1) * in_dim];
            let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            *y = act.apply(dot + bias[o]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward(
    weights: &[f64],
    in_dim: usize,
    out_dim: usize,
    input: &[f64],
    output: &[f64],
    d_out: &mut [f64],
    batch: usize,
    act: Activation,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    if act != Activation::Linear {
        for (d, y) in d_out.iter_mut().zip(output) {
            *d *= act.derivative_from_output(*y);
        }
    }
    let mut d_in = if want_input_grad { Some(vec![0.0; batch * in_dim]) } else { None };
    for b in 0..batch {
        let x = &input[b * in_dim..(b + 1) * in_dim];
        let d = &d_out[b * out_dim..(b + 1) * out_dim];
        for (o, &g) in d.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad_b[o] += g;
            let gw = &mut grad_w[o * in_dim..(o + 1) * in_dim];
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += g * xi;
            }
            if let Some(d_in) = d_in.as_mut() {
                let w = &weights[o * in_dim..(o + 1) * in_dim];
                let di = &mut d_in[b * in_dim..(b + 1) * in_dim];
                for (dii, wi) in di.iter_mut().zip(w) {
                    *dii += g * wi;
                }
            }
        }
    }
    d_in
}
