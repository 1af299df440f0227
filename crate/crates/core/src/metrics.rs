//! Evaluation instruments: EVM, transmitter NMSE and Welch spectra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{db10, dft_in_place, CMat, Complex64, Direction};
use crate::waveform::{FdSymbolMatrix, TdFrame};

/// Reported in place of `-inf` when the error is exactly zero.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Equalization {
    /// Divide by a known complex gain (e.g. `alpha` times the PA gain).
    KnownGain(Complex64),
    /// Per-user least-squares scalar `sum y s* / sum |s|^2`.
    LsScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmReport {
    pub per_user_pct: Vec<f64>,
    /// RMS over users.
    pub aggregate_pct: f64,
}

/// Per-user running sums so EVM can be pooled over many OFDM symbols.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvmAccumulator {
    err: Vec<f64>,
    reference: Vec<f64>,
}

impl EvmAccumulator {
    pub fn add(&mut self, received: &CMat, reference: &FdSymbolMatrix, eq: Equalization) -> Result<()> {
        let (n, users) = (reference.n(), reference.users());
        if received.rows() != n || received.cols() != users {
            return Err(Error::dim(format!(
                "received {}x{} against a {n}x{users} reference",
                received.rows(),
                received.cols()
            )));
        }
        if self.err.is_empty() {
            self.err = vec![0.0; users];
            self.reference = vec![0.0; users];
        } else if self.err.len() != users {
            return Err(Error::dim("user count changed between symbols".to_string()));
        }
        let s = &reference.symbols;
        for u in 0..users {
            let p_ref: f64 = reference.mask.indices().iter().map(|&k| s[(k, u)].norm_sqr()).sum();
            let gain = match eq {
                Equalization::KnownGain(g) => g,
                Equalization::LsScalar => {
                    if p_ref == 0.0 {
                        return Err(Error::ZeroReference);
                    }
                    let c: Complex64 =
                        reference.mask.indices().iter().map(|&k| received[(k, u)] * s[(k, u)].conj()).sum();
                    if c == Complex64::new(0.0, 0.0) {
                        Complex64::new(1.0, 0.0)
                    } else {
                        c / p_ref
                    }
                }
            };
            if gain == Complex64::new(0.0, 0.0) {
                return Err(Error::invalid("equalization gain is zero"));
            }
            let e: f64 = reference.mask.indices().iter().map(|&k| (received[(k, u)] / gain - s[(k, u)]).norm_sqr()).sum();
            self.err[u] += e;
            self.reference[u] += p_ref;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvmReport> {
        if self.reference.is_empty() || self.reference.iter().any(|&p| p == 0.0) {
            return Err(Error::ZeroReference);
        }
        let per_user_pct: Vec<f64> =
            self.err.iter().zip(&self.reference).map(|(e, p)| 100.0 * (e / p).sqrt()).collect();
        let ms = per_user_pct.iter().map(|v| v * v).sum::<f64>() / per_user_pct.len() as f64;
        Ok(EvmReport { aggregate_pct: ms.sqrt(), per_user_pct })
    }
}

/// EVM of `received` against the transmitted symbols on the data mask.
pub fn evm(received: &CMat, reference: &FdSymbolMatrix, eq: Equalization) -> Result<EvmReport> {
    let mut acc = EvmAccumulator::default();
    acc.add(received, reference, eq)?;
    acc.report()
}

/// Error and reference energy sums for TX-NMSE over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmseAccumulator {
    pub err: f64,
    pub reference: f64,
}

impl NmseAccumulator {
    pub fn add(&mut self, actual: &CMat, ideal: &CMat) -> Result<()> {
        if actual.rows() != ideal.rows() || actual.cols() != ideal.cols() {
            return Err(Error::dim(format!(
                "actual {}x{} vs ideal {}x{}",
                actual.rows(),
                actual.cols(),
                ideal.rows(),
                ideal.cols()
            )));
        }
        for (a, i) in actual.as_slice().iter().zip(ideal.as_slice()) {
            self.err += (a - i).norm_sqr();
            self.reference += i.norm_sqr();
        }
        Ok(())
    }

    pub fn db(&self) -> Result<f64> {
        if self.reference == 0.0 {
            return Err(Error::ZeroReference);
        }
        if self.err == 0.0 {
            return Ok(NMSE_FLOOR_DB);
        }
        Ok(db10(self.err / self.reference).max(NMSE_FLOOR_DB))
    }
}

/// `10 log10(||actual - ideal||^2 / ||ideal||^2)`; works on TD frames or
/// their FD equivalents alike.
pub fn tx_nmse(actual: &CMat, ideal: &CMat) -> Result<f64> {
    let mut acc = NmseAccumulator::default();
    acc.add(actual, ideal)?;
    acc.db()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            // periodic form, the natural choice for overlapped spectral averaging
            Window::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    pub segment: usize,
    pub overlap: f64,
    pub window: Window,
}

impl Default for WelchConfig {
    fn default() -> Self {
        WelchConfig { segment: 2048, overlap: 0.5, window: Window::Hann }
    }
}

/// Two-sided spectrum of a complex baseband stream, frequencies ascending
/// from `-fs/2`. Density is W/Hz into 1 ohm; `density_dbm_hz` is the same in
/// dBm/Hz (`-inf` where the density is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub freqs_hz: Vec<f64>,
    pub density: Vec<f64>,
    pub segment: usize,
    pub overlap: f64,
    pub window: Window,
    pub fs_hz: f64,
}

impl PsdEstimate {
    pub fn density_dbm_hz(&self) -> Vec<f64> {
        self.density.iter().map(|&p| 10.0 * (p * 1e3).log10()).collect()
    }

    pub fn bin_width_hz(&self) -> f64 {
        self.fs_hz / self.segment as f64
    }

    /// Integral of the density over frequency.
    pub fn total_power(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.bin_width_hz()
    }
}

fn welch_linear(x: &[Complex64], fs_hz: f64, cfg: &WelchConfig) -> Result<Vec<f64>> {
    let seg = cfg.segment;
    if seg == 0 || !seg.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(seg));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::invalid(format!("overlap {} must lie in [0, 1)", cfg.overlap)));
    }
    if !(fs_hz > 0.0) {
        return Err(Error::invalid("sampling rate must be positive"));
    }
    if x.len() < seg {
        return Err(Error::invalid(format!("stream of {} samples is shorter than one segment of {seg}", x.len())));
    }
    let hop = ((seg as f64 * (1.0 - cfg.overlap)).round() as usize).max(1);
    let w = cfg.window.coefficients(seg);
    let w_energy: f64 = w.iter().map(|v| v * v).sum();
    let mut acc = vec![0.0; seg];
    let mut buf = vec![Complex64::new(0.0, 0.0); seg];
    let mut count = 0usize;
    let mut start = 0;
    while start + seg <= x.len() {
        for ((b, s), wi) in buf.iter_mut().zip(&x[start..start + seg]).zip(&w) {
            *b = s * wi;
        }
        dft_in_place(&mut buf, Direction::Forward)?;
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += hop;
    }
    let scale = 1.0 / (count as f64 * fs_hz * w_energy);
    // reorder to ascending frequency
    let half = seg / 2;
    Ok((0..seg).map(|i| acc[(i + half) % seg] * scale).collect())
}

fn frequencies(seg: usize, fs_hz: f64) -> Vec<f64> {
    let half = (seg / 2) as f64;
    (0..seg).map(|i| (i as f64 - half) * fs_hz / seg as f64).collect()
}

/// Averaged modified periodogram.
pub fn welch_psd(x: &[Complex64], fs_hz: f64, cfg: &WelchConfig) -> Result<PsdEstimate> {
    let density = welch_linear(x, fs_hz, cfg)?;
    Ok(PsdEstimate {
        freqs_hz: frequencies(cfg.segment, fs_hz),
        density,
        segment: cfg.segment,
        overlap: cfg.overlap,
        window: cfg.window,
        fs_hz,
    })
}

/// Spectrum of `actual - ideal`, power-summed over branches.
pub fn error_psd(actual: &TdFrame, ideal: &TdFrame, fs_hz: f64, cfg: &WelchConfig) -> Result<PsdEstimate> {
    branch_sum_psd(&actual.0.sub(&ideal.0)?, fs_hz, cfg)
}

/// Welch spectrum of each column of `x`, power-summed.
pub fn branch_sum_psd(x: &CMat, fs_hz: f64, cfg: &WelchConfig) -> Result<PsdEstimate> {
    let mut total = vec![0.0; cfg.segment];
    for b in 0..x.cols() {
        let d = welch_linear(&x.column(b), fs_hz, cfg)?;
        for (t, v) in total.iter_mut().zip(d) {
            *t += v;
        }
    }
    Ok(PsdEstimate {
        freqs_hz: frequencies(cfg.segment, fs_hz),
        density: total,
        segment: cfg.segment,
        overlap: cfg.overlap,
        window: cfg.window,
        fs_hz,
    })
}
