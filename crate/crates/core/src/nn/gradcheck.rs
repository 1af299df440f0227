use super::{ConditionedNet, Gradients};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSample {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckSample>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `|a - n| / max(|a| + |n|, floor)`. The floor keeps parameters with
/// vanishing gradient from being judged on rounding noise alone.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Central-difference check of `analytic` against the batch loss of `net`.
/// With `max_params = Some(k)` a random subset of `k` parameters is probed.
#[allow(clippy::too_many_arguments)]
pub fn grad_check<N: ConditionedNet + Clone>(
    net: &N,
    inputs: &[f64],
    batch: usize,
    c: &[f64; 2],
    targets: &[f64],
    analytic: &Gradients,
    step: f64,
    max_params: Option<usize>,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&step) {
        return Err(Error::invalid(format!("finite-difference step {step} outside [1e-8, 1e-4]")));
    }
    let loss = |n: &N| -> Result<f64> {
        let out = n.predict(inputs, batch, c)?;
        Ok(out.iter().zip(targets).map(|(y, t)| (y - t) * (y - t)).sum())
    };
    let base = loss(net)?;
    let sizes: Vec<usize> = net.param_tensors().iter().map(|t| t.len()).collect();
    if sizes.len() != analytic.tensors.len() || sizes.iter().zip(&analytic.tensors).any(|(s, g)| *s != g.len()) {
        return Err(Error::dim("gradient layout does not match the model".to_string()));
    }
    let mut all: Vec<(usize, usize)> =
        sizes.iter().enumerate().flat_map(|(t, &n)| (0..n).map(move |i| (t, i))).collect();
    if let Some(k) = max_params {
        if k < all.len() {
            // partial Fisher-Yates
            for i in 0..k {
                let j = i + rng.uniform_int((all.len() - i) as u64) as usize;
                all.swap(i, j);
            }
            all.truncate(k);
        }
    }
    // Central differences carry roughly eps * |L| / h of rounding noise, about
    // 1e-10 |L| at h = 1e-6; gradients far below 1e-4 |L| are compared in
    // absolute terms against that scale.
    let floor = 1e-4 * base.abs().max(1.0);
    let mut probe = net.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for (t, i) in all {
        let orig = probe.param_tensors()[t][i];
        probe.param_tensors_mut()[t][i] = orig + step;
        let plus = loss(&probe)?;
        probe.param_tensors_mut()[t][i] = orig - step;
        let minus = loss(&probe)?;
        probe.param_tensors_mut()[t][i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.tensors[t][i];
        let rel = relative_error(a, numeric, floor);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some(GradCheckSample { tensor: t, index: i, analytic: a, numeric, rel_err: rel });
        }
    }
    Ok(report)
}
