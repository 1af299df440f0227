//! Per-branch time-domain predistortion fitted by indirect learning. Its
//! outputs become the frequency-domain predistorter's training targets.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lstsq, CMat, Complex64};
use crate::pa::{BranchCoeffs, MpArray, MpCoeffs, PaArrayModel};
use crate::waveform::{SignalState, TdFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpdShape {
    pub memory: usize,
    pub order: usize,
}

/// Column `(k, m)` holds `x[n-m] |x[n-m]|^{k-1}` with zero history, in the
/// same k-major order as [`MpCoeffs`].
pub fn mp_regressor_matrix(x: &[Complex64], memory: usize, order: usize) -> Result<CMat> {
    if order == 0 || order % 2 == 0 {
        return Err(Error::invalid(format!("order must be odd, got {order}")));
    }
    let orders = (order + 1) / 2;
    let p = orders * (memory + 1);
    if x.len() <= p {
        return Err(Error::dim(format!("{} samples cannot support {p} regressors", x.len())));
    }
    let mut a = CMat::zeros(x.len(), p);
    for n in 0..x.len() {
        for m in 0..=memory.min(n) {
            let v = x[n - m];
            let mag2 = v.norm_sqr();
            let mut term = v;
            for j in 0..orders {
                a[(n, j * (memory + 1) + m)] = term;
                term *= mag2;
            }
        }
    }
    Ok(a)
}

/// Normalized squared error of `actual` against `reference`, in dB.
pub fn nmse_db(actual: &[Complex64], reference: &[Complex64]) -> f64 {
    let err: f64 = actual.iter().zip(reference).map(|(a, r)| (a - r).norm_sqr()).sum();
    let ref_energy: f64 = reference.iter().map(|r| r.norm_sqr()).sum();
    10.0 * (err / ref_energy).log10()
}

/// Result of an indirect-learning fit.
#[derive(Debug, Clone)]
pub struct IlaFit {
    pub coeffs: MpCoeffs,
    /// Cascade NMSE before fitting followed by one entry per iteration.
    pub nmse_history_db: Vec<f64>,
}

fn cascade_nmse(pa: &MpCoeffs, dpd: &MpCoeffs, probe: &[Complex64]) -> f64 {
    let g = pa.small_signal_gain();
    let y = pa.apply(&dpd.apply(probe));
    let ideal: Vec<Complex64> = probe.iter().map(|x| x * g).collect();
    nmse_db(&y, &ideal)
}

/// Fits a postinverse of `pa` on `probe` and copies it in front of the PA,
/// repeating `iterations` times. The regression runs on RMS-normalized
/// samples so the ridge term acts on well-scaled coefficients.
pub fn ila_fit(pa: &MpCoeffs, probe: &[Complex64], shape: DpdShape, iterations: usize, ridge: f64) -> Result<IlaFit> {
    if iterations == 0 {
        return Err(Error::invalid("indirect learning needs at least one iteration"));
    }
    let rms = (probe.iter().map(|z| z.norm_sqr()).sum::<f64>() / probe.len().max(1) as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::invalid("probe signal is empty or all zero"));
    }
    let g = pa.small_signal_gain();
    let mut dpd = MpCoeffs::identity();
    let mut best = (cascade_nmse(pa, &dpd, probe), dpd.clone());
    let mut history = vec![best.0];
    let mut rises = 0;

    for _ in 0..iterations {
        let xd = dpd.apply(probe);
        let y = pa.apply(&xd);
        let u: Vec<Complex64> = y.iter().map(|v| v / (g * rms)).collect();
        let target: Vec<Complex64> = xd.iter().map(|v| v / rms).collect();
        let phi = mp_regressor_matrix(&u, shape.memory, shape.order)?;
        let theta = lstsq(&phi, &target, ridge)?;
        let mut next = MpCoeffs::new(shape.memory, shape.order, theta)?;
        for k in (1..=shape.order).step_by(2) {
            for m in 0..=shape.memory {
                let v = next.get(k, m) / rms.powi(k as i32 - 1);
                next.set(k, m, v);
            }
        }
        let nmse = cascade_nmse(pa, &next, probe);
        if !nmse.is_finite() {
            return Err(Error::Diverged("cascade output is not finite".into()));
        }
        if nmse > *history.last().expect("nonempty") {
            rises += 1;
            if rises >= 2 {
                return Err(Error::Diverged(format!("cascade NMSE rose twice in a row to {nmse:.2} dB")));
            }
        } else {
            rises = 0;
        }
        history.push(nmse);
        if nmse < best.0 {
            best = (nmse, next.clone());
        }
        dpd = next;
    }
    Ok(IlaFit { coeffs: best.1, nmse_history_db: history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdDpdConfig {
    pub iterations: usize,
    pub ridge: f64,
    /// Overrides the PA's memory depth when set.
    #[serde(default)]
    pub memory: Option<usize>,
    /// Overrides the PA's order when set.
    #[serde(default)]
    pub order: Option<usize>,
}

impl Default for TdDpdConfig {
    fn default() -> Self {
        TdDpdConfig { iterations: 2, ridge: 1e-8, memory: None, order: None }
    }
}

/// Per-branch, per-state predistorters; stored in the PA coefficient format.
#[derive(Debug, Clone, PartialEq)]
pub struct TdDpdModel {
    pub array: MpArray,
}

impl TdDpdModel {
    /// Pass-through predistorter for `branches` antennas.
    pub fn identity(branches: usize, gain: Complex64) -> Self {
        TdDpdModel {
            array: MpArray {
                branches: vec![BranchCoeffs::Shared(MpCoeffs::identity()); branches],
                gain,
                ref_amplitude: None,
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.array.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(TdDpdModel { array: MpArray::load(path)? })
    }
}

/// Fits one predistorter per (branch, state). `probes` supplies the
/// representative TD signal of each state, one column per branch.
pub fn fit_td_dpd(
    pa: &PaArrayModel,
    probes: &[(SignalState, TdFrame)],
    cfg: &TdDpdConfig,
) -> Result<TdDpdModel> {
    let branches = pa.num_branches();
    let jobs: Vec<(usize, usize)> =
        (0..branches).flat_map(|b| (0..probes.len()).map(move |s| (b, s))).collect();
    let fits: Vec<MpCoeffs> = jobs
        .par_iter()
        .map(|&(b, si)| {
            let (state, frame) = &probes[si];
            if frame.streams() != branches {
                return Err(Error::dim(format!(
                    "probe for state {} has {} streams, expected {branches}",
                    state.id,
                    frame.streams()
                )));
            }
            let pa_coeffs = pa.coeffs(b, state.id)?;
            let shape = DpdShape {
                memory: cfg.memory.unwrap_or(pa_coeffs.memory()),
                order: cfg.order.unwrap_or(pa_coeffs.order()),
            };
            ila_fit(pa_coeffs, &frame.stream(b), shape, cfg.iterations, cfg.ridge).map(|f| f.coeffs)
        })
        .collect::<Result<_>>()?;

    let mut per_branch: Vec<BTreeMap<u32, MpCoeffs>> = vec![BTreeMap::new(); branches];
    for (&(b, si), c) in jobs.iter().zip(fits) {
        per_branch[b].insert(probes[si].0.id, c);
    }
    Ok(TdDpdModel {
        array: MpArray {
            branches: per_branch.into_iter().map(BranchCoeffs::PerState).collect(),
            gain: pa.gain,
            ref_amplitude: None,
        },
    })
}

/// `x''`: every branch passed through its predistorter for `state`.
pub fn td_dpd_apply(model: &TdDpdModel, frame: &TdFrame, state: &SignalState) -> Result<TdFrame> {
    model.array.apply(frame, state.id)
}
