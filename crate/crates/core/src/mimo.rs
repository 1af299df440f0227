//! Line-of-sight channel synthesis, zero-forcing precoding, transmit power
//! normalization and the noisy user receiver.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cond_1norm, dbm_to_watts, inverse, CMat, Complex64, RngStream};
use crate::waveform::{SubcarrierMask, TdFrame};

/// Conditioning limit above which a Gram matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserGeometry {
    pub distance_m: f64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub carrier_ghz: f64,
    pub median_gain_db_at_1m: f64,
    pub pathloss_exponent: f64,
    /// Element spacing in wavelengths.
    #[serde(default = "half_wavelength")]
    pub spacing_wavelengths: f64,
}

fn half_wavelength() -> f64 {
    0.5
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            carrier_ghz: 30.0,
            median_gain_db_at_1m: -61.9,
            pathloss_exponent: 2.1,
            spacing_wavelengths: 0.5,
        }
    }
}

impl ChannelParams {
    /// Linear power gain at distance `d` metres.
    pub fn power_gain(&self, distance_m: f64) -> f64 {
        10f64.powf((self.median_gain_db_at_1m - 10.0 * self.pathloss_exponent * distance_m.log10()) / 10.0)
    }
}

/// Frequency-flat U x B channel shared by every subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub h: CMat,
    pub geometry: Vec<UserGeometry>,
    pub params: ChannelParams,
}

impl ChannelModel {
    pub fn users(&self) -> usize {
        self.h.rows()
    }

    pub fn antennas(&self) -> usize {
        self.h.cols()
    }
}

/// Unit-modulus ULA response toward `angle_deg`, measured from the array axis.
pub fn steering_vector(antennas: usize, angle_deg: f64, spacing_wavelengths: f64) -> Vec<Complex64> {
    let phase = 2.0 * PI * spacing_wavelengths * angle_deg.to_radians().cos();
    (0..antennas).map(|b| Complex64::from_polar(1.0, -phase * b as f64)).collect()
}

pub fn los_channel(
    geometry: &[UserGeometry],
    params: &ChannelParams,
    antennas: usize,
    rng: &mut RngStream,
) -> Result<ChannelModel> {
    let users = geometry.len();
    if users == 0 || antennas < users {
        return Err(Error::invalid(format!("need 1 <= U <= B, got U={users}, B={antennas}")));
    }
    if geometry.iter().any(|g| !(g.distance_m > 0.0)) {
        return Err(Error::invalid("user distances must be positive"));
    }
    let mut h = CMat::zeros(users, antennas);
    for (u, g) in geometry.iter().enumerate() {
        let amp = params.power_gain(g.distance_m).sqrt();
        let common = Complex64::from_polar(1.0, 2.0 * PI * rng.uniform());
        let a = steering_vector(antennas, g.angle_deg, params.spacing_wavelengths);
        for (b, ab) in a.into_iter().enumerate() {
            h[(u, b)] = ab * common * amp;
        }
    }
    let cond = cond_1norm(&h.matmul(&h.adjoint())?);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    Ok(ChannelModel { h, geometry: geometry.to_vec(), params: *params })
}

/// Zero-forcing precoder `x = alpha W s` with `H W = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    pub w: CMat,
    pub alpha: f64,
}

impl Precoder {
    pub fn with_alpha(&self, alpha: f64) -> Precoder {
        Precoder { w: self.w.clone(), alpha }
    }

    pub fn users(&self) -> usize {
        self.w.cols()
    }

    pub fn antennas(&self) -> usize {
        self.w.rows()
    }
}

pub fn zf_precoder(h: &CMat) -> Result<Precoder> {
    if h.rows() > h.cols() {
        return Err(Error::RankDeficient(format!("{}x{} channel has more users than antennas", h.rows(), h.cols())));
    }
    let h_adj = h.adjoint();
    let gram = h.matmul(&h_adj)?;
    let cond = cond_1norm(&gram);
    if cond.is_infinite() {
        return Err(Error::RankDeficient("H H^H is singular".into()));
    }
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let w = h_adj.matmul(&inverse(&gram)?)?;
    Ok(Precoder { w, alpha: 1.0 })
}

/// `x[k] = alpha W s[k]` for every subcarrier (rows of `s`).
pub fn apply_precoding(s: &CMat, p: &Precoder) -> Result<CMat> {
    if s.cols() != p.users() {
        return Err(Error::dim(format!("{} user streams but precoder serves {}", s.cols(), p.users())));
    }
    // X = alpha S W^T
    let wt = CMat::from_fn(p.users(), p.antennas(), |u, b| p.w[(b, u)] * p.alpha);
    s.matmul(&wt)
}

/// Scales the frame so its mean per-branch power equals `target_dbm`
/// (watts into 1 ohm). Returns the scaled frame and the applied factor.
pub fn normalize_power(frame: &TdFrame, target_dbm: f64) -> Result<(TdFrame, f64)> {
    let p = frame.mean_power();
    if !(p > 0.0) {
        return Err(Error::invalid("cannot normalize an all-zero frame"));
    }
    let alpha = (dbm_to_watts(target_dbm) / p).sqrt();
    let scaled = frame.samples().scale(Complex64::new(alpha, 0.0));
    Ok((TdFrame(scaled), alpha))
}

/// Left inverse of `alpha W`: `(W^H W)^-1 W^H / alpha`.
pub fn precoder_pinv(p: &Precoder) -> Result<CMat> {
    if !(p.alpha != 0.0 && p.alpha.is_finite()) {
        return Err(Error::RankDeficient(format!("precoder scale {}", p.alpha)));
    }
    let w_adj = p.w.adjoint();
    let gram = w_adj.matmul(&p.w)?;
    let cond = cond_1norm(&gram);
    if cond.is_infinite() {
        return Err(Error::RankDeficient("W^H W is singular".into()));
    }
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    Ok(inverse(&gram)?.matmul(&w_adj)?.scale(Complex64::new(1.0 / p.alpha, 0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    /// Sampling bandwidth the noise is spread over.
    pub bandwidth_hz: f64,
    pub enabled: bool,
}

impl NoiseConfig {
    pub fn thermal(bandwidth_hz: f64) -> Self {
        NoiseConfig { noise_psd_dbm_hz: -174.0, noise_figure_db: 7.0, bandwidth_hz, enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config("noise bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Noise power falling in one of `n` bins, in watts.
    pub fn bin_power_watts(&self, n: usize) -> f64 {
        dbm_to_watts(self.noise_psd_dbm_hz + self.noise_figure_db) * self.bandwidth_hz / n as f64
    }

    /// Per-bin variance in unnormalized-DFT units, `N^2` times the bin power.
    pub fn bin_variance(&self, n: usize) -> f64 {
        if self.enabled {
            self.bin_power_watts(n) * (n * n) as f64
        } else {
            0.0
        }
    }
}

/// `y[k] = H x[k] + n[k]` on the data subcarriers; zero elsewhere.
pub fn receive(
    x_fd_out: &CMat,
    channel: &ChannelModel,
    noise: &NoiseConfig,
    mask: &SubcarrierMask,
    rng: &mut RngStream,
) -> Result<CMat> {
    let (n, b) = (x_fd_out.rows(), x_fd_out.cols());
    if b != channel.antennas() || mask.n() != n {
        return Err(Error::dim(format!(
            "received {n}x{b} frame against {} antennas and a {}-bin mask",
            channel.antennas(),
            mask.n()
        )));
    }
    let users = channel.users();
    let sigma = noise.bin_variance(n).sqrt();
    let mut y = CMat::zeros(n, users);
    for &k in mask.indices() {
        let row = x_fd_out.row(k);
        for u in 0..users {
            let mut acc: Complex64 = channel.h.row(u).iter().zip(row).map(|(h, x)| h * x).sum();
            if noise.enabled {
                acc += rng.complex_gaussian() * sigma;
            }
            y[(k, u)] = acc;
        }
    }
    Ok(y)
}
