//! Memory-polynomial power amplifier models, the synthetic ground-truth PA
//! array and the coefficient file format shared with the TD predistorter.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dbm_to_watts, CMat, Complex64, RngStream};
use crate::waveform::{SignalState, TdFrame};

/// Memory polynomial `y[n] = sum_{k odd} sum_m a_{k,m} x[n-m] |x[n-m]|^{k-1}`.
///
/// Coefficients are stored k-major, m-minor: index `((k-1)/2) * (M+1) + m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpCoeffs {
    memory: usize,
    order: usize,
    coeffs: Vec<Complex64>,
}

impl MpCoeffs {
    pub fn new(memory: usize, order: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if order == 0 || order % 2 == 0 {
            return Err(Error::invalid(format!("MP order must be odd and positive, got {order}")));
        }
        let expected = (order + 1) / 2 * (memory + 1);
        if coeffs.len() != expected {
            return Err(Error::dim(format!(
                "MP(M={memory}, K={order}) needs {expected} coefficients, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::invalid("MP coefficients must be finite"));
        }
        Ok(MpCoeffs { memory, order, coeffs })
    }

    pub fn linear(gain: Complex64) -> Self {
        MpCoeffs { memory: 0, order: 1, coeffs: vec![gain] }
    }

    pub fn identity() -> Self {
        Self::linear(Complex64::new(1.0, 0.0))
    }

    pub fn zeros(memory: usize, order: usize) -> Result<Self> {
        Self::new(memory, order, vec![Complex64::new(0.0, 0.0); (order + 1) / 2 * (memory + 1)])
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of odd orders `ceil(K/2)`.
    pub fn num_orders(&self) -> usize {
        (self.order + 1) / 2
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn index(&self, k: usize, m: usize) -> usize {
        debug_assert!(k % 2 == 1 && k <= self.order && m <= self.memory);
        (k - 1) / 2 * (self.memory + 1) + m
    }

    /// Coefficient `a_{k,m}`; zero outside the stored model.
    pub fn get(&self, k: usize, m: usize) -> Complex64 {
        if k % 2 == 0 || k > self.order || m > self.memory {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[self.index(k, m)]
        }
    }

    pub fn set(&mut self, k: usize, m: usize, value: Complex64) {
        let i = self.index(k, m);
        self.coeffs[i] = value;
    }

    pub fn small_signal_gain(&self) -> Complex64 {
        self.coeffs[0]
    }

    /// `|a_{1,0}| - sum_{(k,m) != (1,0)} |a_{k,m}| x_ref^{k-1}`; positive
    /// means the linear term dominates up to `x_ref`.
    pub fn dominance_margin(&self, x_ref: f64) -> f64 {
        let mut rest = 0.0;
        for k in (1..=self.order).step_by(2) {
            for m in 0..=self.memory {
                if k == 1 && m == 0 {
                    continue;
                }
                rest += self.get(k, m).norm() * x_ref.powi(k as i32 - 1);
            }
        }
        self.small_signal_gain().norm() - rest
    }

    /// Runs the polynomial over `x` with zero initial history.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let orders = self.num_orders();
        let mut basis = vec![Complex64::new(0.0, 0.0); x.len() * orders];
        for (n, &xn) in x.iter().enumerate() {
            let mag2 = xn.norm_sqr();
            let mut term = xn;
            for j in 0..orders {
                basis[n * orders + j] = term;
                term *= mag2;
            }
        }
        let mut y = vec![Complex64::new(0.0, 0.0); x.len()];
        for (n, yn) in y.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..=self.memory.min(n) {
                let row = &basis[(n - m) * orders..(n - m + 1) * orders];
                for (j, b) in row.iter().enumerate() {
                    acc += self.coeffs[j * (self.memory + 1) + m] * b;
                }
            }
            *yn = acc;
        }
        y
    }
}

pub fn mp_apply(c: &MpCoeffs, x: &[Complex64]) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::invalid("empty input stream"));
    }
    Ok(c.apply(x))
}

/// Coefficients of one branch: one set for every state, or one per state.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchCoeffs {
    Shared(MpCoeffs),
    PerState(BTreeMap<u32, MpCoeffs>),
}

impl BranchCoeffs {
    pub fn for_state(&self, state_id: u32) -> Option<&MpCoeffs> {
        match self {
            BranchCoeffs::Shared(c) => Some(c),
            BranchCoeffs::PerState(map) => map.get(&state_id),
        }
    }
}

/// Per-branch memory polynomials, used both for the PA array and for the
/// per-branch TD predistorters.
#[derive(Debug, Clone, PartialEq)]
pub struct MpArray {
    pub branches: Vec<BranchCoeffs>,
    /// Linear gain of the ideal (distortion-free) array.
    pub gain: Complex64,
    /// Amplitude up to which the linear term must dominate, if known.
    pub ref_amplitude: Option<f64>,
}

pub type PaArrayModel = MpArray;

impl MpArray {
    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn coeffs(&self, branch: usize, state_id: u32) -> Result<&MpCoeffs> {
        self.branches
            .get(branch)
            .ok_or_else(|| Error::dim(format!("branch {branch} out of range")))?
            .for_state(state_id)
            .ok_or(Error::UnknownState(state_id))
    }

    /// Checks that every listed state resolves on every branch.
    pub fn check_states(&self, states: &[SignalState]) -> Result<()> {
        for s in states {
            for b in 0..self.branches.len() {
                self.coeffs(b, s.id)?;
            }
        }
        Ok(())
    }

    /// Passes column `b` of the frame through branch `b`.
    pub fn apply(&self, frame: &TdFrame, state_id: u32) -> Result<TdFrame> {
        if frame.streams() != self.branches.len() {
            return Err(Error::dim(format!(
                "frame has {} columns but the array has {} branches",
                frame.streams(),
                self.branches.len()
            )));
        }
        let models: Vec<&MpCoeffs> =
            (0..self.branches.len()).map(|b| self.coeffs(b, state_id)).collect::<Result<_>>()?;
        let columns: Vec<Vec<Complex64>> =
            models.par_iter().enumerate().map(|(b, c)| c.apply(&frame.stream(b))).collect();
        let mut out = CMat::zeros(frame.n(), frame.streams());
        for (b, col) in columns.iter().enumerate() {
            out.set_column(b, col);
        }
        Ok(TdFrame(out))
    }

    pub fn to_file_format(&self) -> MpArrayFile {
        let to_entry = |state_id: Option<u32>, c: &MpCoeffs| MpStateEntry {
            state_id,
            memory: c.memory,
            order: c.order,
            coeffs: c.coeffs.iter().map(|z| [z.re, z.im]).collect(),
        };
        MpArrayFile {
            branches: self
                .branches
                .iter()
                .map(|b| MpBranchEntry {
                    states: match b {
                        BranchCoeffs::Shared(c) => vec![to_entry(None, c)],
                        BranchCoeffs::PerState(map) => map.iter().map(|(id, c)| to_entry(Some(*id), c)).collect(),
                    },
                })
                .collect(),
            gain: [self.gain.re, self.gain.im],
            ref_amplitude: self.ref_amplitude,
        }
    }

    pub fn from_file_format(file: MpArrayFile) -> Result<Self> {
        if file.branches.is_empty() {
            return Err(Error::invalid("coefficient file lists no branches"));
        }
        let mut branches = Vec::with_capacity(file.branches.len());
        for (bi, b) in file.branches.into_iter().enumerate() {
            let mut shared = None;
            let mut map = BTreeMap::new();
            for e in b.states {
                let c = MpCoeffs::new(
                    e.memory,
                    e.order,
                    e.coeffs.iter().map(|p| Complex64::new(p[0], p[1])).collect(),
                )?;
                if let Some(x_ref) = file.ref_amplitude {
                    if c.dominance_margin(x_ref) <= 0.0 {
                        return Err(Error::invalid(format!(
                            "branch {bi}: linear term does not dominate at the reference amplitude"
                        )));
                    }
                }
                match e.state_id {
                    None if shared.is_none() && map.is_empty() => shared = Some(c),
                    Some(id) if shared.is_none() && !map.contains_key(&id) => {
                        map.insert(id, c);
                    }
                    _ => return Err(Error::invalid(format!("branch {bi}: conflicting state entries"))),
                }
            }
            branches.push(match shared {
                Some(c) => BranchCoeffs::Shared(c),
                None if !map.is_empty() => BranchCoeffs::PerState(map),
                None => return Err(Error::invalid(format!("branch {bi} has no coefficients"))),
            });
        }
        let gain = Complex64::new(file.gain[0], file.gain[1]);
        if !(gain.norm() > 0.0 && gain.norm().is_finite()) {
            return Err(Error::invalid("array gain must be finite and nonzero"));
        }
        Ok(MpArray { branches, gain, ref_amplitude: file.ref_amplitude })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file_format())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: MpArrayFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_file_format(file)
    }
}

/// On-disk coefficient document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpArrayFile {
    pub branches: Vec<MpBranchEntry>,
    pub gain: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_amplitude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpBranchEntry {
    pub states: Vec<MpStateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpStateEntry {
    /// `null` applies to every state.
    pub state_id: Option<u32>,
    pub memory: usize,
    pub order: usize,
    pub coeffs: Vec<[f64; 2]>,
}

pub fn pa_array_apply(model: &PaArrayModel, frame: &TdFrame, state: &SignalState) -> Result<TdFrame> {
    model.apply(frame, state.id)
}

/// Per-state memory depth and order, keyed by bandwidth and power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaSchedule {
    /// `(bandwidth_mhz, memory)` pairs; the nearest bandwidth wins.
    pub memory_by_bandwidth: Vec<(f64, usize)>,
    /// `(power_dbm, order)` pairs; the nearest power wins.
    pub order_by_power: Vec<(f64, usize)>,
    /// Relative change of the nonlinear coefficients per dB of drive above
    /// the reference power.
    #[serde(default)]
    pub nonlinearity_per_db: f64,
    /// Exponent of `BW / BW_ref` applied to the nonlinear memory taps.
    #[serde(default)]
    pub memory_bandwidth_exponent: f64,
    #[serde(default = "default_ref_bw")]
    pub ref_bandwidth_mhz: f64,
}

fn default_ref_bw() -> f64 {
    50.0
}

impl PaSchedule {
    /// Memory 3/4/5/6/7 at 10..50 MHz and order 7/7/5 at -20/-22/-24 dBm.
    pub fn standard() -> Self {
        PaSchedule {
            memory_by_bandwidth: vec![(10.0, 3), (20.0, 4), (30.0, 5), (40.0, 6), (50.0, 7)],
            order_by_power: vec![(-20.0, 7), (-22.0, 7), (-24.0, 5)],
            nonlinearity_per_db: 0.0,
            memory_bandwidth_exponent: 0.0,
            ref_bandwidth_mhz: 50.0,
        }
    }

    pub fn memory_for(&self, bandwidth_mhz: f64) -> usize {
        nearest(&self.memory_by_bandwidth, bandwidth_mhz)
    }

    pub fn order_for(&self, power_dbm: f64) -> usize {
        nearest(&self.order_by_power, power_dbm)
    }

    fn max_memory(&self) -> usize {
        self.memory_by_bandwidth.iter().map(|p| p.1).max().unwrap_or(0)
    }

    fn max_order(&self) -> usize {
        self.order_by_power.iter().map(|p| p.1).max().unwrap_or(1)
    }
}

fn nearest(table: &[(f64, usize)], key: f64) -> usize {
    table
        .iter()
        .min_by(|a, b| (a.0 - key).abs().total_cmp(&(b.0 - key).abs()))
        .map(|p| p.1)
        .expect("schedule tables are validated nonempty")
}

/// Recipe for the synthetic ground-truth PA array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaSynthSpec {
    pub order: usize,
    pub memory: usize,
    /// CW gain compression at the reference amplitude.
    pub compression_db: f64,
    pub ref_dbm: f64,
    /// Reference amplitude sits this far above the RMS level of `ref_dbm`.
    pub ref_papr_db: f64,
    pub gain_db: f64,
    /// Relative per-branch coefficient spread (0.05 = 5 %).
    pub perturbation: f64,
    pub am_pm_deg: f64,
    /// First nonlinear memory tap relative to the memoryless term.
    pub memory_strength: f64,
    /// First linear memory tap relative to the main tap.
    pub linear_memory: f64,
    /// Geometric decay per additional memory tap.
    pub memory_decay: f64,
    #[serde(default)]
    pub schedule: Option<PaSchedule>,
}

impl Default for PaSynthSpec {
    fn default() -> Self {
        PaSynthSpec {
            order: 7,
            memory: 3,
            compression_db: 1.0,
            ref_dbm: -20.0,
            ref_papr_db: 6.0,
            gain_db: 0.0,
            perturbation: 0.05,
            am_pm_deg: 15.0,
            memory_strength: 0.3,
            linear_memory: 0.03,
            memory_decay: 0.5,
            schedule: None,
        }
    }
}

/// Normalized AM/AM shape `1 - u^2 + 0.3 u^4 - 0.04 u^6`, monotone output
/// amplitude over the range the compression search explores.
const ORDER_PROFILE: [f64; 4] = [1.0, -1.0, 0.3, -0.04];

impl PaSynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.order % 2 == 0 || self.order > 2 * ORDER_PROFILE.len() - 1 {
            return Err(Error::Config(format!("PA order must be odd and at most 7, got {}", self.order)));
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return Err(Error::Config(format!(
                "perturbation must lie in [0, 1), got {}",
                self.perturbation
            )));
        }
        if !(self.compression_db > 0.0 && self.compression_db < 3.0) {
            return Err(Error::Config("compression_db must lie in (0, 3)".into()));
        }
        if let Some(s) = &self.schedule {
            if s.memory_by_bandwidth.is_empty() || s.order_by_power.is_empty() {
                return Err(Error::Config("PA schedule tables must be nonempty".into()));
            }
            if s.order_by_power.iter().any(|p| p.1 % 2 == 0 || p.1 > 7) {
                return Err(Error::Config("scheduled PA orders must be odd and at most 7".into()));
            }
        }
        Ok(())
    }

    /// Reference amplitude in sqrt(W).
    pub fn ref_amplitude(&self) -> f64 {
        (dbm_to_watts(self.ref_dbm) * 10f64.powf(self.ref_papr_db / 10.0)).sqrt()
    }

    fn full_memory(&self) -> usize {
        self.schedule.as_ref().map_or(self.memory, |s| s.max_memory().max(self.memory))
    }

    fn full_order(&self) -> usize {
        self.schedule.as_ref().map_or(self.order, |s| s.max_order().max(self.order))
    }

    /// Unit-gain coefficients in the amplitude normalized by the reference
    /// amplitude, nonlinear terms stretched by `stretch`.
    fn normalized_base(&self, stretch: f64) -> MpCoeffs {
        let (memory, order) = (self.full_memory(), self.full_order());
        let mut c = MpCoeffs::zeros(memory, order).expect("validated shape");
        let am_pm = self.am_pm_deg.to_radians();
        let tap_phase = 0.4;
        for k in (1..=order).step_by(2) {
            let j = (k - 1) / 2;
            for m in 0..=memory {
                let value = if k == 1 {
                    match m {
                        0 => Complex64::new(1.0, 0.0),
                        _ => Complex64::from_polar(
                            self.linear_memory * self.memory_decay.powi(m as i32 - 1),
                            -tap_phase * m as f64,
                        ),
                    }
                } else {
                    let tap = if m == 0 { 1.0 } else { self.memory_strength * self.memory_decay.powi(m as i32 - 1) };
                    Complex64::from_polar(
                        ORDER_PROFILE[j] * stretch.powi(k as i32 - 1) * tap,
                        am_pm * j as f64 + tap_phase * m as f64,
                    )
                };
                c.set(k, m, value);
            }
        }
        c
    }

    /// Solves for the stretch that gives `compression_db` at unit amplitude.
    fn solve_stretch(&self) -> Result<f64> {
        let target = self.compression_db;
        let (mut lo, mut hi) = (0.0, 1.0);
        if cw_compression_db(&self.normalized_base(hi), 1.0) < target {
            return Err(Error::Config(format!("cannot reach {target} dB compression")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cw_compression_db(&self.normalized_base(mid), 1.0) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// CW gain drop (dB) at amplitude `amp` relative to the small-signal gain,
/// evaluated on a constant envelope so every memory tap sees the same value.
pub fn cw_compression_db(c: &MpCoeffs, amp: f64) -> f64 {
    -20.0 * (cw_gain(c, amp).norm() / cw_gain(c, 0.0).norm()).log10()
}

/// Complex CW gain `sum_k (sum_m a_{k,m}) amp^{k-1}`.
pub fn cw_gain(c: &MpCoeffs, amp: f64) -> Complex64 {
    let mut g = Complex64::new(0.0, 0.0);
    for k in (1..=c.order()).step_by(2) {
        let tap_sum: Complex64 = (0..=c.memory()).map(|m| c.get(k, m)).sum();
        g += tap_sum * amp.powi(k as i32 - 1);
    }
    g
}

/// Builds the ground-truth array: a base polynomial tuned to the requested
/// compression, denormalized to physical amplitude, then perturbed per
/// branch. With a schedule, each state gets its own truncated and
/// state-modulated copy of the branch polynomial.
pub fn synth_pa_array(
    branches: usize,
    spec: &PaSynthSpec,
    states: &[SignalState],
    rng: &mut RngStream,
) -> Result<PaArrayModel> {
    spec.validate()?;
    if branches == 0 {
        return Err(Error::invalid("PA array needs at least one branch"));
    }
    let stretch = spec.solve_stretch()?;
    let base = spec.normalized_base(stretch);
    let x_ref = spec.ref_amplitude();
    let gain = Complex64::new(10f64.powf(spec.gain_db / 20.0), 0.0);

    let mut out = Vec::with_capacity(branches);
    for _ in 0..branches {
        let mut physical = base.clone();
        for k in (1..=base.order()).step_by(2) {
            for m in 0..=base.memory() {
                let factor = if k == 1 && m == 0 {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(1.0, 0.0) + rng.complex_gaussian() * spec.perturbation
                };
                let v = base.get(k, m) * factor * gain / x_ref.powi(k as i32 - 1);
                physical.set(k, m, v);
            }
        }
        out.push(match &spec.schedule {
            None => BranchCoeffs::Shared(truncate(&physical, spec.memory, spec.order)),
            Some(schedule) => {
                let mut map = BTreeMap::new();
                for s in states {
                    map.insert(s.id, scheduled_coeffs(&physical, schedule, s, spec.ref_dbm));
                }
                BranchCoeffs::PerState(map)
            }
        });
    }
    Ok(MpArray { branches: out, gain, ref_amplitude: Some(x_ref) })
}

fn truncate(c: &MpCoeffs, memory: usize, order: usize) -> MpCoeffs {
    let mut t = MpCoeffs::zeros(memory, order).expect("valid shape");
    for k in (1..=order).step_by(2) {
        for m in 0..=memory {
            t.set(k, m, c.get(k, m));
        }
    }
    t
}

fn scheduled_coeffs(full: &MpCoeffs, schedule: &PaSchedule, state: &SignalState, ref_dbm: f64) -> MpCoeffs {
    let memory = schedule.memory_for(state.bandwidth_mhz);
    let order = schedule.order_for(state.rms_power_dbm);
    let mut c = truncate(full, memory, order);
    let nl_scale = (1.0 + schedule.nonlinearity_per_db * (state.rms_power_dbm - ref_dbm)).max(0.0);
    let mem_scale = (state.bandwidth_mhz / schedule.ref_bandwidth_mhz).powf(schedule.memory_bandwidth_exponent);
    for k in (3..=order).step_by(2) {
        for m in 0..=memory {
            let s = if m == 0 { nl_scale } else { nl_scale * mem_scale };
            let v = c.get(k, m) * s;
            c.set(k, m, v);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::StateGrid;

    fn naive_mp(c: &MpCoeffs, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); x.len()];
        for n in 0..x.len() {
            for k in (1..=c.order()).step_by(2) {
                for m in 0..=c.memory() {
                    if n >= m {
                        let v = x[n - m];
                        y[n] += c.get(k, m) * v * v.norm().powi(k as i32 - 1);
                    }
                }
            }
        }
        y
    }

    fn random_coeffs(memory: usize, order: usize, rng: &mut RngStream) -> MpCoeffs {
        let n = (order + 1) / 2 * (memory + 1);
        MpCoeffs::new(memory, order, (0..n).map(|_| rng.complex_gaussian() * 0.3).collect()).unwrap()
    }

    #[test]
    fn linear_pa_scales() {
        let g = Complex64::new(0.8, -0.3);
        let x = vec![Complex64::new(0.2, 0.1), Complex64::new(-1.0, 0.5)];
        let y = mp_apply(&MpCoeffs::linear(g), &x).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert_eq!(*a, g * b);
        }
    }

    #[test]
    fn cubic_hand_value() {
        let c = MpCoeffs::new(0, 3, vec![Complex64::new(1.0, 0.0), Complex64::new(-0.1, 0.0)]).unwrap();
        let y = mp_apply(&c, &[Complex64::new(1.0, 0.0)]).unwrap();
        assert!((y[0] - Complex64::new(0.9, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = RngStream::new(21, 0);
        let c = random_coeffs(4, 7, &mut rng);
        let x: Vec<Complex64> = (0..64).map(|_| rng.complex_gaussian()).collect();
        let fast = c.apply(&x);
        let slow = naive_mp(&c, &x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-12 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn odd_symmetry_and_phase_equivariance() {
        let mut rng = RngStream::new(22, 0);
        let c = random_coeffs(3, 5, &mut rng);
        let x: Vec<Complex64> = (0..32).map(|_| rng.complex_gaussian()).collect();
        let y = c.apply(&x);
        let neg: Vec<Complex64> = x.iter().map(|z| -z).collect();
        for (a, b) in c.apply(&neg).iter().zip(&y) {
            assert_eq!(*a, -b);
        }
        let rot = Complex64::from_polar(1.0, 0.7);
        let xr: Vec<Complex64> = x.iter().map(|z| z * rot).collect();
        for (a, b) in c.apply(&xr).iter().zip(&y) {
            assert!((a - b * rot).norm() < 1e-12 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn invalid_shapes() {
        assert!(MpCoeffs::new(0, 2, vec![Complex64::new(1.0, 0.0)]).is_err());
        assert!(MpCoeffs::new(1, 3, vec![Complex64::new(1.0, 0.0); 3]).is_err());
        assert!(mp_apply(&MpCoeffs::identity(), &[]).is_err());
    }

    fn default_states() -> Vec<SignalState> {
        StateGrid::default_eleven().states().to_vec()
    }

    #[test]
    fn zero_perturbation_gives_identical_branches() {
        let spec = PaSynthSpec { perturbation: 0.0, ..Default::default() };
        let m = synth_pa_array(4, &spec, &default_states(), &mut RngStream::new(1, 0)).unwrap();
        for b in 1..4 {
            assert_eq!(m.branches[b], m.branches[0]);
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = PaSynthSpec::default();
        let a = synth_pa_array(8, &spec, &default_states(), &mut RngStream::new(42, 3)).unwrap();
        let b = synth_pa_array(8, &spec, &default_states(), &mut RngStream::new(42, 3)).unwrap();
        assert_eq!(a, b);
        let c = synth_pa_array(8, &spec, &default_states(), &mut RngStream::new(43, 3)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn compression_at_reference_drive() {
        let spec = PaSynthSpec { gain_db: 30.0, ..Default::default() };
        let m = synth_pa_array(3, &spec, &default_states(), &mut RngStream::new(42, 0)).unwrap();
        let x_ref = spec.ref_amplitude();
        for b in 0..3 {
            let c = m.coeffs(b, 1).unwrap();
            // sweep the AM/AM curve numerically with a constant-envelope tone
            let tone = vec![Complex64::new(x_ref, 0.0); 64];
            let small = vec![Complex64::new(x_ref * 1e-4, 0.0); 64];
            let g_ref = c.apply(&tone)[63].norm() / x_ref;
            let g_small = c.apply(&small)[63].norm() / (x_ref * 1e-4);
            let comp = 20.0 * (g_small / g_ref).log10();
            assert!((0.5..=2.0).contains(&comp), "branch {b}: {comp} dB");
            assert!((comp - cw_compression_db(c, x_ref)).abs() < 1e-6);
            assert!(c.dominance_margin(x_ref) > 0.0);
        }
    }

    #[test]
    fn small_signal_is_linear() {
        let spec = PaSynthSpec::default();
        let m = synth_pa_array(1, &spec, &default_states(), &mut RngStream::new(42, 0)).unwrap();
        let c = m.coeffs(0, 1).unwrap();
        let memless = MpCoeffs::new(0, 1, vec![c.small_signal_gain()]).unwrap();
        let amp = spec.ref_amplitude() * 0.01; // 40 dB below reference
        let mut rng = RngStream::new(5, 0);
        let x: Vec<Complex64> = (0..256).map(|_| rng.complex_gaussian() * amp).collect();
        let linear_part = {
            let mut lin = MpCoeffs::zeros(c.memory(), 1).unwrap();
            for m in 0..=c.memory() {
                lin.set(1, m, c.get(1, m));
            }
            lin
        };
        let y = c.apply(&x);
        let yl = linear_part.apply(&x);
        let err: f64 = y.iter().zip(&yl).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let norm: f64 = yl.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(err / norm < 1e-3);
        let x1 = [Complex64::new(amp, 0.0)];
        let ratio = c.apply(&x1)[0] / memless.apply(&x1)[0];
        assert!((ratio - 1.0).norm() < 1e-3);
    }

    #[test]
    fn perturbation_limits() {
        let spec = PaSynthSpec { perturbation: 1.0, ..Default::default() };
        assert!(synth_pa_array(2, &spec, &default_states(), &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn schedule_shapes() {
        let spec = PaSynthSpec { schedule: Some(PaSchedule::standard()), ..Default::default() };
        let states = default_states();
        let m = synth_pa_array(2, &spec, &states, &mut RngStream::new(0, 0)).unwrap();
        m.check_states(&states).unwrap();
        let c = m.coeffs(1, 1).unwrap();
        assert_eq!((c.memory(), c.order()), (7, 7));
        let c = m.coeffs(1, 5).unwrap();
        assert_eq!((c.memory(), c.order()), (3, 5));
        assert!(m.coeffs(0, 99).is_err());
    }

    #[test]
    fn array_apply_matches_branch_loop() {
        let spec = PaSynthSpec::default();
        let states = default_states();
        let m = synth_pa_array(3, &spec, &states, &mut RngStream::new(0, 0)).unwrap();
        let mut rng = RngStream::new(9, 0);
        let amp = spec.ref_amplitude() / 2.0;
        let frame = TdFrame(CMat::from_fn(128, 3, |_, _| rng.complex_gaussian() * amp));
        let out = pa_array_apply(&m, &frame, &states[0]).unwrap();
        for b in 0..3 {
            let expected = m.coeffs(b, 1).unwrap().apply(&frame.stream(b));
            assert_eq!(out.stream(b), expected);
        }
        let zero = pa_array_apply(&m, &TdFrame(CMat::zeros(16, 3)), &states[0]).unwrap();
        assert_eq!(zero.samples().frobenius(), 0.0);
        let lin = MpArray {
            branches: vec![BranchCoeffs::Shared(MpCoeffs::linear(Complex64::new(2.0, 0.0))); 3],
            gain: Complex64::new(2.0, 0.0),
            ref_amplitude: None,
        };
        let out = lin.apply(&frame, 1).unwrap();
        assert_eq!(out.samples(), &frame.samples().scale(Complex64::new(2.0, 0.0)));
        assert!(lin.apply(&TdFrame(CMat::zeros(4, 2)), 1).is_err());
    }

    #[test]
    fn file_roundtrip_and_validation() {
        let spec = PaSynthSpec { schedule: Some(PaSchedule::standard()), ..Default::default() };
        let states = default_states();
        let m = synth_pa_array(2, &spec, &states, &mut RngStream::new(0, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pa.json");
        m.save(&path).unwrap();
        assert_eq!(MpArray::load(&path).unwrap(), m);

        let mut file = m.to_file_format();
        file.branches[0].states[0].coeffs.pop();
        assert!(MpArray::from_file_format(file).is_err());

        let mut file = m.to_file_format();
        file.branches[0].states[0].coeffs[1] = [1e9, 0.0];
        assert!(MpArray::from_file_format(file).is_err());

        std::fs::write(&path, "{\"branches\": [").unwrap();
        assert!(matches!(MpArray::load(&path), Err(Error::Format { .. })));
    }
}
