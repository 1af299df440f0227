//! OFDM symbol construction: signal states and their conditioning vector,
//! subcarrier masks, QAM generation and the frequency/time conversions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dbm_to_mw, dft_in_place, CMat, Complex64, Direction, RngStream};

/// One (bandwidth, RMS power) operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub id: u32,
    pub bandwidth_mhz: f64,
    pub rms_power_dbm: f64,
}

impl SignalState {
    pub fn new(id: u32, bandwidth_mhz: f64, rms_power_dbm: f64) -> Self {
        SignalState { id, bandwidth_mhz, rms_power_dbm }
    }

    pub fn label(&self) -> String {
        format!("{} MHz / {} dBm", self.bandwidth_mhz, self.rms_power_dbm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    states: Vec<SignalState>,
    training_ids: Vec<u32>,
    bw_max_mhz: f64,
    p_max_mw: f64,
}

impl StateGrid {
    pub fn new(states: Vec<SignalState>, training_ids: Vec<u32>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Config("state grid is empty".into()));
        }
        for (i, s) in states.iter().enumerate() {
            if !(s.bandwidth_mhz > 0.0) || !s.rms_power_dbm.is_finite() {
                return Err(Error::Config(format!("state {} has an invalid operating point", s.id)));
            }
            if states[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Config(format!("state id {} appears twice", s.id)));
            }
        }
        if training_ids.is_empty() {
            return Err(Error::Config("no training states selected".into()));
        }
        for id in &training_ids {
            if !states.iter().any(|s| s.id == *id) {
                return Err(Error::Config(format!("training state {id} is not in the grid")));
            }
        }
        let bw_max_mhz = states.iter().map(|s| s.bandwidth_mhz).fold(0.0, f64::max);
        let p_max_mw = states.iter().map(|s| dbm_to_mw(s.rms_power_dbm)).fold(0.0, f64::max);
        Ok(StateGrid { states, training_ids, bw_max_mhz, p_max_mw })
    }

    /// Eleven states on the {10..50 MHz} x {-20,-22,-24 dBm} lattice: four
    /// corners and two interior points for training (ids 1-6), five held out
    /// (ids 7-11).
    pub fn default_eleven() -> Self {
        let states = vec![
            SignalState::new(1, 50.0, -20.0),
            SignalState::new(2, 10.0, -20.0),
            SignalState::new(3, 30.0, -22.0),
            SignalState::new(4, 50.0, -24.0),
            SignalState::new(5, 10.0, -24.0),
            SignalState::new(6, 40.0, -22.0),
            SignalState::new(7, 30.0, -20.0),
            SignalState::new(8, 50.0, -22.0),
            SignalState::new(9, 20.0, -22.0),
            SignalState::new(10, 30.0, -24.0),
            SignalState::new(11, 10.0, -22.0),
        ];
        StateGrid::new(states, vec![1, 2, 3, 4, 5, 6]).expect("default grid is valid")
    }

    pub fn states(&self) -> &[SignalState] {
        &self.states
    }

    pub fn training_ids(&self) -> &[u32] {
        &self.training_ids
    }

    pub fn training_states(&self) -> Vec<SignalState> {
        self.training_ids.iter().filter_map(|id| self.get(*id)).collect()
    }

    pub fn is_training(&self, id: u32) -> bool {
        self.training_ids.contains(&id)
    }

    pub fn get(&self, id: u32) -> Option<SignalState> {
        self.states.iter().copied().find(|s| s.id == id)
    }

    pub fn bw_max_mhz(&self) -> f64 {
        self.bw_max_mhz
    }

    pub fn p_max_mw(&self) -> f64 {
        self.p_max_mw
    }

    /// The state with the largest bandwidth, ties broken by highest power.
    pub fn far_corner(&self) -> SignalState {
        *self
            .states
            .iter()
            .max_by(|a, b| {
                a.bandwidth_mhz
                    .total_cmp(&b.bandwidth_mhz)
                    .then(a.rms_power_dbm.total_cmp(&b.rms_power_dbm))
            })
            .expect("grid is nonempty")
    }
}

/// Conditioning vector `[BW / BW_max, P_mW / P_max_mW]`.
pub fn make_state_vector(state: &SignalState, grid: &StateGrid) -> Result<[f64; 2]> {
    let c = [
        state.bandwidth_mhz / grid.bw_max_mhz(),
        dbm_to_mw(state.rms_power_dbm) / grid.p_max_mw(),
    ];
    if c.iter().any(|v| !(*v > 0.0 && *v <= 1.0 + 1e-12)) {
        return Err(Error::UnknownState(state.id));
    }
    Ok(c)
}

/// Data subcarrier set: `N_d` bins centered on DC with DC itself unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubcarrierMask {
    n: usize,
    indices: Vec<usize>,
    active: Vec<bool>,
}

impl SubcarrierMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Active FFT bins in ascending order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, k: usize) -> bool {
        self.active.get(k).copied().unwrap_or(false)
    }
}

/// Number of data subcarriers is `N * BW / fs` rounded to the nearest even count.
pub fn build_subcarrier_mask(n: usize, fs_mhz: f64, bandwidth_mhz: f64) -> Result<SubcarrierMask> {
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    if !(fs_mhz > 0.0 && bandwidth_mhz > 0.0) {
        return Err(Error::invalid("sampling rate and bandwidth must be positive"));
    }
    let n_d = 2 * ((n as f64 * bandwidth_mhz / fs_mhz) / 2.0).round() as usize;
    if n_d >= n {
        return Err(Error::invalid(format!(
            "{bandwidth_mhz} MHz needs {n_d} data subcarriers but only {n} bins exist"
        )));
    }
    if n_d == 0 {
        return Err(Error::invalid(format!("{bandwidth_mhz} MHz occupies no subcarriers")));
    }
    let half = n_d / 2;
    let mut indices: Vec<usize> = (1..=half).chain(n - half..n).collect();
    indices.sort_unstable();
    let mut active = vec![false; n];
    for &k in &indices {
        active[k] = true;
    }
    Ok(SubcarrierMask { n, indices, active })
}

/// Square QAM alphabet with unit average power.
pub fn qam_alphabet(order: usize) -> Result<Vec<Complex64>> {
    let side = match order {
        4 => 2,
        16 => 4,
        64 => 8,
        _ => return Err(Error::invalid(format!("unsupported QAM order {order}"))),
    };
    let norm = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
    let level = |i: usize| (2 * i) as f64 - (side - 1) as f64;
    Ok((0..side)
        .flat_map(|i| (0..side).map(move |q| Complex64::new(level(i), level(q)) / norm))
        .collect())
}

/// N x U frequency-domain user symbols; zero off the data mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FdSymbolMatrix {
    pub symbols: CMat,
    pub mask: SubcarrierMask,
}

impl FdSymbolMatrix {
    pub fn n(&self) -> usize {
        self.symbols.rows()
    }

    pub fn users(&self) -> usize {
        self.symbols.cols()
    }
}

pub fn gen_fd_symbols(
    users: usize,
    mask: &SubcarrierMask,
    qam_order: usize,
    rng: &mut RngStream,
) -> Result<FdSymbolMatrix> {
    if users == 0 {
        return Err(Error::invalid("at least one user is required"));
    }
    let alphabet = qam_alphabet(qam_order)?;
    let mut symbols = CMat::zeros(mask.n(), users);
    for &k in mask.indices() {
        for u in 0..users {
            symbols[(k, u)] = alphabet[rng.uniform_int(alphabet.len() as u64) as usize];
        }
    }
    Ok(FdSymbolMatrix { symbols, mask: mask.clone() })
}

/// N x C time-domain samples of one OFDM symbol (C users or C antennas).
#[derive(Debug, Clone, PartialEq)]
pub struct TdFrame(pub CMat);

impl TdFrame {
    pub fn samples(&self) -> &CMat {
        &self.0
    }

    pub fn into_inner(self) -> CMat {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn streams(&self) -> usize {
        self.0.cols()
    }

    /// Samples of stream `c` as a contiguous vector.
    pub fn stream(&self, c: usize) -> Vec<Complex64> {
        self.0.column(c)
    }

    /// Mean per-sample power over all streams.
    pub fn mean_power(&self) -> f64 {
        let m = &self.0;
        m.as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>() / (m.rows() * m.cols()) as f64
    }
}

fn columnwise(m: &CMat, direction: Direction) -> Result<CMat> {
    let mut out = m.clone();
    let mut col = vec![Complex64::new(0.0, 0.0); m.rows()];
    for c in 0..m.cols() {
        for (r, v) in col.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
        dft_in_place(&mut col, direction)?;
        out.set_column(c, &col);
    }
    Ok(out)
}

/// Per-column inverse DFT (IDFT + P/S).
pub fn fd_to_td(fd: &CMat) -> Result<TdFrame> {
    columnwise(fd, Direction::Inverse).map(TdFrame)
}

/// Per-column forward DFT (S/P + DFT), the frequency-domain equivalent form.
pub fn td_to_fd(td: &TdFrame) -> Result<CMat> {
    columnwise(&td.0, Direction::Forward)
}
