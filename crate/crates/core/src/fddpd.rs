//! Frequency-domain predistortion with a neural network: tap assembly,
//! inference on FD symbol matrices, target generation from TD-DPD outputs
//! and mixed-state training.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mimo::{precoder_pinv, Precoder};
use crate::nn::{AdamConfig, AdamState, Checkpoint, ConditionedNet, Gradients, HnFdnnModel, Mlp, MlpSpec, ModelKind};
use crate::numerics::{CMat, Complex64, RngStream};
use crate::waveform::{fd_to_td, td_to_fd, SignalState, TdFrame};

/// What `s[n - m]` means for `n < m`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapBoundary {
    /// Wrap around within the OFDM symbol.
    #[default]
    Circular,
    /// Treat samples before the symbol as zero.
    Zero,
}

pub fn tap_dim(memory: usize, users: usize) -> usize {
    2 * (memory + 1) * users
}

/// Row-major `N x 2(M+1)U` tap matrix. Row `n` is
/// `[s_R[n], .., s_R[n-M], s_I[n], .., s_I[n-M]]` with each `s_R[.]` a
/// U-vector, all multiplied by `scale`.
pub fn build_taps_scaled(s: &TdFrame, memory: usize, boundary: TapBoundary, scale: f64) -> Result<Vec<f64>> {
    let (n, users) = (s.n(), s.streams());
    if memory >= n {
        return Err(Error::invalid(format!("memory {memory} must be shorter than the {n}-sample frame")));
    }
    let d = tap_dim(memory, users);
    let im_off = (memory + 1) * users;
    let mut out = vec![0.0; n * d];
    let m = s.samples();
    for t in 0..n {
        let row = &mut out[t * d..(t + 1) * d];
        for lag in 0..=memory {
            let src = if t >= lag {
                t - lag
            } else if boundary == TapBoundary::Circular {
                t + n - lag
            } else {
                continue;
            };
            for u in 0..users {
                let v = m[(src, u)] * scale;
                row[lag * users + u] = v.re;
                row[im_off + lag * users + u] = v.im;
            }
        }
    }
    Ok(out)
}

pub fn build_taps(s: &TdFrame, memory: usize, boundary: TapBoundary) -> Result<Vec<f64>> {
    build_taps_scaled(s, memory, boundary, 1.0)
}

/// Row-major `N x 2U` output targets `[s_R[n], s_I[n]]`.
fn real_rows(s: &TdFrame, scale: f64) -> Vec<f64> {
    let (n, users) = (s.n(), s.streams());
    let mut out = vec![0.0; n * 2 * users];
    for t in 0..n {
        for u in 0..users {
            let v = s.samples()[(t, u)] * scale;
            out[t * 2 * users + u] = v.re;
            out[t * 2 * users + users + u] = v.im;
        }
    }
    out
}

fn from_real_rows(rows: &[f64], n: usize, users: usize, scale: f64) -> TdFrame {
    TdFrame(CMat::from_fn(n, users, |t, u| {
        Complex64::new(rows[t * 2 * users + u], rows[t * 2 * users + users + u]) / scale
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum FdNet {
    Hn(HnFdnnModel),
    Plain(Mlp),
}

impl FdNet {
    pub fn as_net(&self) -> &dyn ConditionedNet {
        match self {
            FdNet::Hn(m) => m,
            FdNet::Plain(m) => m,
        }
    }

    pub fn main_spec(&self) -> &MlpSpec {
        match self {
            FdNet::Hn(m) => &m.main_spec,
            FdNet::Plain(m) => &m.spec,
        }
    }
}

/// A trained FD predistorter: network plus the tap layout and the fixed
/// scale applied to TD samples before they enter the network.
#[derive(Debug, Clone, PartialEq)]
pub struct FdDpdModel {
    pub net: FdNet,
    pub memory: usize,
    pub boundary: TapBoundary,
    pub input_scale: f64,
}

impl FdDpdModel {
    pub fn new(net: FdNet, memory: usize, boundary: TapBoundary, input_scale: f64) -> Result<Self> {
        let spec = net.main_spec();
        let users = spec.output_dim() / 2;
        if spec.output_dim() % 2 != 0 || spec.input_dim() != tap_dim(memory, users) {
            return Err(Error::Config(format!(
                "network {} does not fit memory {memory}: needs input 2(M+1)U and output 2U",
                spec.describe()
            )));
        }
        if !(input_scale > 0.0 && input_scale.is_finite()) {
            return Err(Error::Config(format!("input scale {input_scale} must be positive")));
        }
        Ok(FdDpdModel { net, memory, boundary, input_scale })
    }

    pub fn users(&self) -> usize {
        self.net.main_spec().output_dim() / 2
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        let ck = match &self.net {
            FdNet::Hn(m) => Checkpoint::from_hn(m, adam),
            FdNet::Plain(m) => Checkpoint::from_mlp(m, adam),
        };
        ck.with_meta("memory", self.memory)
            .with_meta("boundary", serde_json::to_value(self.boundary).expect("plain enum"))
            .with_meta("input_scale", self.input_scale)
    }

    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&MlpSpec>) -> Result<Self> {
        let net = match ck.kind {
            ModelKind::HnFdnn => FdNet::Hn(ck.to_hn(expected)?),
            ModelKind::Mlp => FdNet::Plain(ck.to_mlp(expected)?),
        };
        let memory = ck.meta.get("memory").and_then(|v| v.as_u64()).ok_or_else(|| Error::invalid("checkpoint lacks memory"))?;
        let boundary = match ck.meta.get("boundary") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => TapBoundary::Circular,
        };
        let scale = ck.meta_f64("input_scale").ok_or_else(|| Error::invalid("checkpoint lacks input_scale"))?;
        FdDpdModel::new(net, memory as usize, boundary, scale)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None).save(path)
    }

    pub fn load(path: &Path, expected: Option<&MlpSpec>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }
}

const INFER_CHUNK: usize = 512;

/// `S' = f(S, c)`: IDFT, taps, per-sample network, DFT.
pub fn fd_dpd_infer(model: &FdDpdModel, s_fd: &CMat, c: &[f64; 2]) -> Result<CMat> {
    let users = model.users();
    if s_fd.cols() != users {
        return Err(Error::dim(format!("{} user streams for a {users}-user model", s_fd.cols())));
    }
    let s = fd_to_td(s_fd)?;
    let n = s.n();
    let taps = build_taps_scaled(&s, model.memory, model.boundary, model.input_scale)?;
    let d = tap_dim(model.memory, users);
    let rows = match &model.net {
        FdNet::Hn(m) => {
            let layer = m.output_layer(c)?;
            taps.par_chunks(INFER_CHUNK * d)
                .map(|chunk| m.forward_with(&layer, chunk, chunk.len() / d))
                .collect::<Result<Vec<_>>>()?
        }
        FdNet::Plain(m) => taps
            .par_chunks(INFER_CHUNK * d)
            .map(|chunk| m.predict(chunk, chunk.len() / d, c))
            .collect::<Result<Vec<_>>>()?,
    };
    let rows: Vec<f64> = rows.concat();
    td_to_fd(&from_real_rows(&rows, n, users, model.input_scale))
}

/// `S_tar[k] = W^+ x''[k]` on every bin, `x''` being the TD-DPD output.
pub fn gen_targets(x2: &TdFrame, p: &Precoder) -> Result<CMat> {
    if x2.streams() != p.antennas() {
        return Err(Error::dim(format!("{} branches for a {}-antenna precoder", x2.streams(), p.antennas())));
    }
    let pinv = precoder_pinv(p)?;
    let x_fd = td_to_fd(x2)?;
    // rows are subcarriers: S_tar = X (W^+)^T
    let pinv_t = CMat::from_fn(pinv.cols(), pinv.rows(), |b, u| pinv[(u, b)]);
    x_fd.matmul(&pinv_t)
}

/// `sum ||S_tar - f(S)||_F^2` evaluated in the frequency domain.
pub fn fd_loss(model: &FdDpdModel, inputs: &[CMat], targets: &[CMat], c: &[f64; 2]) -> Result<f64> {
    let mut total = 0.0;
    for (s, t) in inputs.iter().zip(targets) {
        let out = fd_dpd_infer(model, s, c)?;
        total += out.sub(t)?.frobenius().powi(2);
    }
    Ok(total)
}

/// `sum_n ||s_tar[n] - s'[n]||^2` evaluated in the time domain.
pub fn td_loss(model: &FdDpdModel, inputs: &[CMat], targets: &[CMat], c: &[f64; 2]) -> Result<f64> {
    let users = model.users();
    let mut total = 0.0;
    for (s, t) in inputs.iter().zip(targets) {
        let td = fd_to_td(s)?;
        let taps = build_taps_scaled(&td, model.memory, model.boundary, model.input_scale)?;
        let out = model.net.as_net().predict(&taps, td.n(), c)?;
        let want = real_rows(&fd_to_td(t)?, model.input_scale);
        if want.len() != out.len() || t.cols() != users {
            return Err(Error::dim("target shape mismatch".to_string()));
        }
        let e: f64 = out.iter().zip(&want).map(|(y, w)| (y - w) * (y - w)).sum();
        total += e / (model.input_scale * model.input_scale);
    }
    Ok(total)
}

/// Inputs and targets of one signal state, both `N x U` FD matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    pub state: SignalState,
    pub c: [f64; 2],
    pub inputs: Vec<CMat>,
    pub targets: Vec<CMat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub n: usize,
    pub users: usize,
    pub records: Vec<StateRecord>,
}

const MAGIC: &[u8; 8] = b"DPDTSET1";

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

impl TrainingSet {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::invalid("training set holds no states"));
        }
        for r in &self.records {
            if r.inputs.is_empty() || r.inputs.len() != r.targets.len() {
                return Err(Error::dim(format!("state {} has mismatched symbol counts", r.state.id)));
            }
            for m in r.inputs.iter().chain(&r.targets) {
                if m.rows() != self.n || m.cols() != self.users {
                    return Err(Error::dim(format!("state {} holds a {}x{} matrix", r.state.id, m.rows(), m.cols())));
                }
            }
        }
        Ok(())
    }

    pub fn record(&self, id: u32) -> Option<&StateRecord> {
        self.records.iter().find(|r| r.state.id == id)
    }

    pub fn file_name(id: u32) -> String {
        format!("state_{id:03}.bin")
    }

    /// One little-endian binary file per state.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        for r in &self.records {
            let mut buf = Vec::with_capacity(80 + r.inputs.len() * self.n * self.users * 32);
            buf.extend_from_slice(MAGIC);
            for v in [self.n as u64, self.users as u64, r.inputs.len() as u64] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&r.state.id.to_le_bytes());
            buf.extend_from_slice(&0u32.to_le_bytes());
            for v in [r.state.bandwidth_mhz, r.state.rms_power_dbm, r.c[0], r.c[1]] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for (i, t) in r.inputs.iter().zip(&r.targets) {
                for m in [i, t] {
                    for z in m.as_slice() {
                        buf.extend_from_slice(&z.re.to_le_bytes());
                        buf.extend_from_slice(&z.im.to_le_bytes());
                    }
                }
            }
            let mut f = std::fs::File::create(dir.join(Self::file_name(r.state.id)))?;
            f.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load_state(path: &Path) -> Result<(usize, usize, StateRecord)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + len).ok_or_else(|| fmt_err(path, "file is truncated"))?;
            pos += len;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(fmt_err(path, "not a training-set record"));
        }
        let mut u64s = [0u64; 3];
        for v in &mut u64s {
            *v = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let [n, users, q] = u64s.map(|v| v as usize);
        let id = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        take(4)?;
        let mut f = [0f64; 4];
        for v in &mut f {
            *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let need = q.checked_mul(2 * n * users * 16).ok_or_else(|| fmt_err(path, "header sizes overflow"))?;
        let body = take(need)?;
        let mut vals = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        let mut mat = || {
            let data = (0..n * users)
                .map(|_| Complex64::new(vals.next().expect("sized"), vals.next().expect("sized")))
                .collect();
            CMat::from_row_major(n, users, data)
        };
        let mut inputs = Vec::with_capacity(q);
        let mut targets = Vec::with_capacity(q);
        for _ in 0..q {
            inputs.push(mat()?);
            targets.push(mat()?);
        }
        if take(1).is_ok() {
            return Err(fmt_err(path, "trailing bytes after the last symbol"));
        }
        let state = SignalState::new(id, f[0], f[1]);
        Ok((n, users, StateRecord { state, c: [f[2], f[3]], inputs, targets }))
    }

    /// Loads the records of `ids`, in that order.
    pub fn load_dir(dir: &Path, ids: &[u32]) -> Result<Self> {
        let mut shape = None;
        let mut records = Vec::with_capacity(ids.len());
        for &id in ids {
            let path = dir.join(Self::file_name(id));
            if !path.exists() {
                return Err(Error::Prerequisite { path, phase: "targets".into() });
            }
            let (n, users, rec) = Self::load_state(&path)?;
            match shape {
                None => shape = Some((n, users)),
                Some(s) if s != (n, users) => return Err(fmt_err(&path, "frame shape differs between states")),
                _ => {}
            }
            if rec.state.id != id {
                return Err(fmt_err(&path, format!("file holds state {}", rec.state.id)));
            }
            records.push(rec);
        }
        let (n, users) = shape.ok_or_else(|| Error::invalid("no states requested"))?;
        let set = TrainingSet { n, users, records };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    /// Tap-samples drawn from every state in each minibatch.
    pub batch_per_state: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Symbols per state held out for validation.
    pub validation_symbols: usize,
    /// Training halts as diverged when an epoch's loss exceeds this multiple
    /// of the untrained network's loss.
    pub divergence_factor: f64,
    /// Decoupled weight decay on the hypernetwork weights; 0 disables it.
    #[serde(default)]
    pub hn_weight_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 100,
            batch_per_state: 128,
            adam: AdamConfig::default(),
            patience: 15,
            validation_symbols: 2,
            divergence_factor: 10.0,
            hn_weight_decay: 0.0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.epochs == 0 || self.batch_per_state == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch_per_state and patience must be positive".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        if !(self.hn_weight_decay >= 0.0) || !self.hn_weight_decay.is_finite() {
            return Err(Error::Config("hn_weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the untrained network on the training samples.
    pub initial_loss_fd: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Mean FD loss per symbol, `||S_tar - S'||_F^2`, for each epoch.
    pub train_loss_fd: Vec<f64>,
    pub val_loss_fd: Vec<f64>,
    pub stopped_early: bool,
    pub minibatches: u64,
    /// Tap-samples consumed per training state over the whole run.
    pub samples_per_state: Vec<(u32, u64)>,
}

struct StateTensors {
    id: u32,
    c: [f64; 2],
    taps: Vec<f64>,
    targets: Vec<f64>,
    rows: usize,
}

fn state_tensors(
    rec: &StateRecord,
    symbols: std::ops::Range<usize>,
    memory: usize,
    boundary: TapBoundary,
    scale: f64,
) -> Result<StateTensors> {
    let mut taps = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    for q in symbols {
        let s = fd_to_td(&rec.inputs[q])?;
        taps.extend(build_taps_scaled(&s, memory, boundary, scale)?);
        targets.extend(real_rows(&fd_to_td(&rec.targets[q])?, scale));
        rows += s.n();
    }
    Ok(StateTensors { id: rec.state.id, c: rec.c, taps, targets, rows })
}

fn eval_loss<N: ConditionedNet>(net: &N, data: &[StateTensors], d_in: usize, d_out: usize) -> Result<f64> {
    let parts = data
        .par_iter()
        .map(|st| -> Result<f64> {
            let mut total = 0.0;
            for start in (0..st.rows).step_by(4096) {
                let end = (start + 4096).min(st.rows);
                let out = net.predict(&st.taps[start * d_in..end * d_in], end - start, &st.c)?;
                total += out.iter().zip(&st.targets[start * d_out..end * d_out]).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum())
}

/// Trains `model` on the records of `state_ids`, drawing an equal number of
/// tap-samples from every state in each minibatch. The loss is minimised in
/// the time domain; reported values are the equivalent FD losses.
pub fn train_fd_dpd(
    model: &mut FdDpdModel,
    data: &TrainingSet,
    state_ids: &[u32],
    hyper: &TrainHyper,
    rng: &mut RngStream,
) -> Result<TrainReport> {
    hyper.validate()?;
    data.validate()?;
    if state_ids.is_empty() {
        return Err(Error::invalid("at least one training state is required"));
    }
    if data.users != model.users() {
        return Err(Error::dim(format!("{}-user data for a {}-user model", data.users, model.users())));
    }
    let (memory, boundary, scale) = (model.memory, model.boundary, model.input_scale);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &id in state_ids {
        let rec = data.record(id).ok_or(Error::UnknownState(id))?;
        let q = rec.inputs.len();
        let hold = hyper.validation_symbols.min(q.saturating_sub(1));
        train.push(state_tensors(rec, 0..q - hold, memory, boundary, scale)?);
        if hold > 0 {
            val.push(state_tensors(rec, q - hold..q, memory, boundary, scale)?);
        }
    }
    let rows = train.iter().map(|t| t.rows).min().expect("nonempty");
    let per = hyper.batch_per_state.min(rows);
    let steps = rows / per;
    let n = data.n as f64;
    let train_symbols = (train[0].rows / data.n) as f64;
    let val_symbols = val.first().map(|v| (v.rows / data.n) as f64).unwrap_or(0.0);
    let states = train.len() as f64;
    // mean FD loss per symbol from a scaled TD sum
    let to_fd = |td_sum: f64, symbols: f64| n * td_sum / (scale * scale) / (symbols * states);

    match &mut model.net {
        FdNet::Hn(m) => run_training(m, &train, &val, per, steps, hyper, rng, &to_fd, train_symbols, val_symbols),
        FdNet::Plain(m) => run_training(m, &train, &val, per, steps, hyper, rng, &to_fd, train_symbols, val_symbols),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training<N: ConditionedNet + Clone>(
    net: &mut N,
    train: &[StateTensors],
    val: &[StateTensors],
    per: usize,
    steps: usize,
    hyper: &TrainHyper,
    rng: &mut RngStream,
    to_fd: &dyn Fn(f64, f64) -> f64,
    train_symbols: f64,
    val_symbols: f64,
) -> Result<TrainReport> {
    let (d_in, d_out) = (net.input_dim(), net.output_dim());
    let mut opt = AdamState::new(net, hyper.adam);
    let initial = to_fd(eval_loss(net, train, d_in, d_out)?, train_symbols);
    let mut report = TrainReport {
        initial_loss_fd: initial,
        epochs_run: 0,
        best_epoch: 0,
        train_loss_fd: Vec::new(),
        val_loss_fd: Vec::new(),
        stopped_early: false,
        minibatches: 0,
        samples_per_state: train.iter().map(|t| (t.id, 0)).collect(),
    };
    let mut best = (f64::INFINITY, net.clone());
    let mut since_best = 0usize;
    let batch_total = (per * train.len()) as f64;
    let decay = 1.0 - hyper.adam.lr * hyper.hn_weight_decay;
    let decay_mask = net.decay_mask();

    for epoch in 0..hyper.epochs {
        let perms: Vec<Vec<usize>> = train
            .iter()
            .map(|t| {
                let mut p: Vec<usize> = (0..t.rows).collect();
                for i in (1..p.len()).rev() {
                    p.swap(i, rng.uniform_int(i as u64 + 1) as usize);
                }
                p
            })
            .collect();
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let parts = train
                .par_iter()
                .zip(&perms)
                .map(|(st, perm)| -> Result<(f64, Gradients)> {
                    let idx = &perm[step * per..(step + 1) * per];
                    let mut x = Vec::with_capacity(per * d_in);
                    let mut y = Vec::with_capacity(per * d_out);
                    for &r in idx {
                        x.extend_from_slice(&st.taps[r * d_in..(r + 1) * d_in]);
                        y.extend_from_slice(&st.targets[r * d_out..(r + 1) * d_out]);
                    }
                    let mut g = Gradients::zeros_like(&*net);
                    let loss = net.accumulate_gradients(&x, per, &st.c, &y, &mut g)?;
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            // every state contributes to every minibatch
            debug_assert_eq!(parts.len(), train.len());
            let mut grads = Gradients::zeros_like(&*net);
            for (k, (loss, g)) in parts.iter().enumerate() {
                epoch_loss += loss;
                grads.add(g);
                report.samples_per_state[k].1 += per as u64;
            }
            grads.scale(1.0 / batch_total);
            opt.step(net, &grads)?;
            if decay < 1.0 {
                for (p, _) in net.param_tensors_mut().into_iter().zip(&decay_mask).filter(|(_, &d)| d) {
                    p.iter_mut().for_each(|w| *w *= decay);
                }
            }
            report.minibatches += 1;
        }
        // scale the sampled loss up to the full training set
        let drawn = (steps * per) as f64 / train[0].rows as f64;
        let train_fd = to_fd(epoch_loss / drawn, train_symbols);
        report.train_loss_fd.push(train_fd);
        report.epochs_run = epoch + 1;
        if !train_fd.is_finite() {
            return Err(Error::Diverged(format!("non-finite training loss at epoch {}", epoch + 1)));
        }
        if train_fd > hyper.divergence_factor * initial {
            return Err(Error::Diverged(format!(
                "training loss {train_fd:.3e} at epoch {} exceeds {}x the untrained loss {initial:.3e}",
                epoch + 1,
                hyper.divergence_factor
            )));
        }
        let monitor = if val.is_empty() {
            train_fd
        } else {
            let v = to_fd(eval_loss(net, val, d_in, d_out)?, val_symbols);
            report.val_loss_fd.push(v);
            v
        };
        if monitor < best.0 {
            best = (monitor, net.clone());
            report.best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    *net = best.1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimo::{apply_precoding, zf_precoder};
    use crate::nn::Activation;
    use crate::waveform::{build_subcarrier_mask, gen_fd_symbols};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_frame(n: usize, users: usize, seed: u64) -> TdFrame {
        let mut rng = RngStream::new(seed, 0);
        TdFrame(CMat::from_fn(n, users, |_, _| rng.complex_gaussian()))
    }

    fn small_hn(users: usize, rng: &mut RngStream) -> HnFdnnModel {
        let d_out = 2 * users;
        HnFdnnModel::random(
            MlpSpec::new(vec![tap_dim(7, users), 20, 6, d_out], Activation::Tanh),
            MlpSpec::new(vec![2, 16, 6 * d_out + d_out], Activation::Relu),
            rng,
        )
        .unwrap()
    }

    #[test]
    fn taps_without_memory() {
        let s = random_frame(8, 1, 1);
        let z = build_taps(&s, 0, TapBoundary::Circular).unwrap();
        assert_eq!(z.len(), 16);
        for n in 0..8 {
            assert_eq!(z[2 * n], s.0[(n, 0)].re);
            assert_eq!(z[2 * n + 1], s.0[(n, 0)].im);
        }
    }

    #[test]
    fn tap_lengths_match_table1() {
        assert_eq!(tap_dim(7, 1), 16);
        assert_eq!(tap_dim(7, 4), 64);
        let z = build_taps(&random_frame(32, 4, 2), 7, TapBoundary::Circular).unwrap();
        assert_eq!(z.len(), 32 * 64);
    }

    #[test]
    fn taps_layout_and_boundaries() {
        let (n, users, m) = (16, 2, 3);
        let s = random_frame(n, users, 3);
        let d = tap_dim(m, users);
        let circ = build_taps(&s, m, TapBoundary::Circular).unwrap();
        let zero = build_taps(&s, m, TapBoundary::Zero).unwrap();
        for t in 0..n {
            for lag in 0..=m {
                for u in 0..users {
                    let src = (t + n - lag) % n;
                    let re = lag * users + u;
                    let im = (m + 1) * users + lag * users + u;
                    assert_eq!(circ[t * d + re], s.0[(src, u)].re);
                    assert_eq!(circ[t * d + im], s.0[(src, u)].im);
                    let (zr, zi) = if t >= lag { (s.0[(src, u)].re, s.0[(src, u)].im) } else { (0.0, 0.0) };
                    assert_eq!((zero[t * d + re], zero[t * d + im]), (zr, zi));
                }
            }
        }
        assert!(build_taps(&s, 16, TapBoundary::Circular).is_err());
    }

    #[test]
    fn zero_output_network_gives_zero() {
        let net = HnFdnnModel::zeros(
            MlpSpec::new(vec![16, 50, 6, 2], Activation::Tanh),
            MlpSpec::new(vec![2, 40, 24, 14], Activation::Relu),
        )
        .unwrap();
        let model = FdDpdModel::new(FdNet::Hn(net), 7, TapBoundary::Circular, 1.0).unwrap();
        let mask = build_subcarrier_mask(64, 200.0, 50.0).unwrap();
        let s = gen_fd_symbols(1, &mask, 16, &mut RngStream::new(4, 0)).unwrap();
        let out = fd_dpd_infer(&model, &s.symbols, &[1.0, 1.0]).unwrap();
        assert_eq!(out.frobenius(), 0.0);
    }

    /// Main net passing `s[n]` straight through: tiny first-layer weights keep
    /// both tanh layers in their linear range, the emitted output layer undoes
    /// the shrink.
    pub(crate) fn pass_through(users: usize) -> HnFdnnModel {
        let d_out = 2 * users;
        let hidden = d_out;
        let mut m = HnFdnnModel::zeros(
            MlpSpec::new(vec![tap_dim(7, users), 2 * hidden, hidden, d_out], Activation::Tanh),
            MlpSpec::new(vec![2, 8, hidden * d_out + d_out], Activation::Relu),
        )
        .unwrap();
        let eps = 1e-6;
        let d_in = tap_dim(7, users);
        for j in 0..d_out {
            // output j: real part of user j for j < U, imaginary otherwise
            let src = if j < users { j } else { 8 * users + (j - users) };
            m.trunk[0].weights[j * d_in + src] = eps;
            m.trunk[1].weights[j * 2 * hidden + j] = 1.0;
        }
        let bias = &mut m.hn.layers[1].bias;
        for j in 0..d_out {
            bias[j * hidden + j] = 1.0 / eps;
        }
        m
    }

    #[test]
    fn pass_through_network_is_identity() {
        for users in [1, 3] {
            let model = FdDpdModel::new(FdNet::Hn(pass_through(users)), 7, TapBoundary::Circular, 1.0).unwrap();
            let mask = build_subcarrier_mask(128, 200.0, 40.0).unwrap();
            let s = gen_fd_symbols(users, &mask, 64, &mut RngStream::new(5, 0)).unwrap();
            // unit-RMS time samples keep the tanh pair within its linear range
            let scaled = s.symbols.scale(c(128.0 / (mask.len() as f64).sqrt(), 0.0));
            let out = fd_dpd_infer(&model, &scaled, &[0.2, 0.7]).unwrap();
            let err = out.sub(&scaled).unwrap().frobenius() / scaled.frobenius();
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn trained_style_model_is_nonlinear() {
        let mut rng = RngStream::new(6, 0);
        let net = small_hn(1, &mut rng);
        let model = FdDpdModel::new(FdNet::Hn(net), 7, TapBoundary::Circular, 10.0).unwrap();
        let mask = build_subcarrier_mask(64, 200.0, 50.0).unwrap();
        let s = gen_fd_symbols(1, &mask, 16, &mut rng).unwrap();
        let a = fd_dpd_infer(&model, &s.symbols.scale(c(2.0, 0.0)), &[0.5, 0.5]).unwrap();
        let b = fd_dpd_infer(&model, &s.symbols, &[0.5, 0.5]).unwrap().scale(c(2.0, 0.0));
        assert!(a.sub(&b).unwrap().frobenius() > 1e-6);
    }

    #[test]
    fn infer_checks_users() {
        let model = FdDpdModel::new(FdNet::Hn(pass_through(1)), 7, TapBoundary::Circular, 1.0).unwrap();
        assert!(fd_dpd_infer(&model, &CMat::zeros(64, 2), &[0.0, 0.0]).is_err());
        let bad = HnFdnnModel::zeros(
            MlpSpec::new(vec![18, 4, 2], Activation::Tanh),
            MlpSpec::new(vec![2, 10], Activation::Relu),
        )
        .unwrap();
        assert!(FdDpdModel::new(FdNet::Hn(bad), 7, TapBoundary::Circular, 1.0).is_err());
    }

    fn channel_precoder(users: usize, antennas: usize, seed: u64) -> Precoder {
        let mut rng = RngStream::new(seed, 0);
        let h = CMat::from_fn(users, antennas, |_, _| rng.complex_gaussian());
        zf_precoder(&h).unwrap().with_alpha(3.7)
    }

    #[test]
    fn targets_of_ideal_chain_recover_symbols() {
        let p = channel_precoder(3, 8, 7);
        let mask = build_subcarrier_mask(256, 200.0, 50.0).unwrap();
        let s = gen_fd_symbols(3, &mask, 16, &mut RngStream::new(8, 0)).unwrap();
        let x = fd_to_td(&apply_precoding(&s.symbols, &p).unwrap()).unwrap();
        let t = gen_targets(&x, &p).unwrap();
        assert!(t.sub(&s.symbols).unwrap().frobenius() < 1e-9 * s.symbols.frobenius());
    }

    #[test]
    fn targets_match_per_bin_loop() {
        let p = channel_precoder(2, 5, 9);
        let x = random_frame(64, 5, 10);
        let t = gen_targets(&x, &p).unwrap();
        let pinv = precoder_pinv(&p).unwrap();
        let xf = td_to_fd(&x).unwrap();
        for k in 0..64 {
            let want = pinv.mul_vec(xf.row(k)).unwrap();
            for u in 0..2 {
                assert!((t[(k, u)] - want[u]).norm() < 1e-12);
            }
        }
        let zero = gen_targets(&TdFrame(CMat::zeros(64, 5)), &p).unwrap();
        assert_eq!(zero.frobenius(), 0.0);
        assert!(gen_targets(&random_frame(64, 4, 1), &p).is_err());
    }

    #[test]
    fn fd_loss_is_n_times_td_loss() {
        let mut rng = RngStream::new(11, 0);
        for (n, users) in [(64usize, 1usize), (256, 2)] {
            let net = small_hn(users, &mut rng);
            let model = FdDpdModel::new(FdNet::Hn(net), 7, TapBoundary::Circular, 5.0).unwrap();
            let inputs: Vec<CMat> = (0..2).map(|_| CMat::from_fn(n, users, |_, _| rng.complex_gaussian())).collect();
            let targets: Vec<CMat> = (0..2).map(|_| CMat::from_fn(n, users, |_, _| rng.complex_gaussian())).collect();
            let fd = fd_loss(&model, &inputs, &targets, &[0.3, 0.6]).unwrap();
            let td = td_loss(&model, &inputs, &targets, &[0.3, 0.6]).unwrap();
            assert!((fd / (n as f64 * td) - 1.0).abs() < 1e-9);
        }
    }

    fn toy_set(n: usize, q: usize, betas: &[f64], rng: &mut RngStream) -> TrainingSet {
        let mask = build_subcarrier_mask(n, 200.0, 50.0).unwrap();
        let records = betas
            .iter()
            .enumerate()
            .map(|(i, &beta)| {
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for _ in 0..q {
                    let s = gen_fd_symbols(1, &mask, 16, rng).unwrap().symbols;
                    let td = fd_to_td(&s).unwrap();
                    let rms = (td.mean_power()).sqrt();
                    // predistortion of a cubic compression at unit RMS
                    let tar = TdFrame(CMat::from_fn(n, 1, |t, _| {
                        let v = td.0[(t, 0)];
                        v * (1.0 + beta * (v / rms).norm_sqr())
                    }));
                    inputs.push(s);
                    targets.push(td_to_fd(&tar).unwrap());
                }
                let id = i as u32 + 1;
                StateRecord { state: SignalState::new(id, 50.0, -20.0 - i as f64), c: [1.0, 1.0 - 0.5 * i as f64], inputs, targets }
            })
            .collect();
        TrainingSet { n, users: 1, records }
    }

    #[test]
    fn training_set_roundtrip_and_errors() {
        let mut rng = RngStream::new(12, 0);
        let set = toy_set(32, 3, &[0.1, 0.2], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        let back = TrainingSet::load_dir(dir.path(), &[1, 2]).unwrap();
        assert_eq!(back, set);
        assert!(matches!(TrainingSet::load_dir(dir.path(), &[3]), Err(Error::Prerequisite { .. })));

        let path = dir.path().join(TrainingSet::file_name(2));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(TrainingSet::load_dir(dir.path(), &[2]), Err(Error::Format { .. })));
    }

    #[test]
    fn fixed_point_has_zero_loss_and_gradient() {
        let mut rng = RngStream::new(13, 0);
        let net = small_hn(1, &mut rng);
        let model = FdDpdModel::new(FdNet::Hn(net.clone()), 7, TapBoundary::Circular, 4.0).unwrap();
        let mut set = toy_set(64, 2, &[0.0], &mut rng);
        let rec = &mut set.records[0];
        rec.targets = rec.inputs.iter().map(|s| fd_dpd_infer(&model, s, &rec.c).unwrap()).collect();
        let st = state_tensors(rec, 0..2, 7, TapBoundary::Circular, 4.0).unwrap();
        let mut g = Gradients::zeros_like(&net);
        let loss = net.accumulate_gradients(&st.taps, st.rows, &st.c, &st.targets, &mut g).unwrap();
        assert!(loss < 1e-20, "{loss}");
        assert!(g.max_abs() < 1e-9);
    }

    #[test]
    fn toy_training_reduces_loss_hundredfold() {
        let mut rng = RngStream::new(14, 0);
        let set = toy_set(64, 8, &[0.05, 0.15], &mut rng);
        let net = small_hn(1, &mut rng);
        let scale = 64.0 / (set.record(1).unwrap().inputs[0].as_slice().iter().filter(|z| z.norm() > 0.0).count() as f64).sqrt();
        let mut model = FdDpdModel::new(FdNet::Hn(net), 7, TapBoundary::Circular, scale).unwrap();
        let hyper = TrainHyper {
            epochs: 200,
            batch_per_state: 32,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            patience: 200,
            validation_symbols: 0,
            divergence_factor: 10.0,
            hn_weight_decay: 0.0,
        };
        let r = train_fd_dpd(&mut model, &set, &[1, 2], &hyper, &mut RngStream::new(15, 0)).unwrap();
        let first = r.initial_loss_fd;
        let best = r.train_loss_fd.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(first / best >= 100.0, "{first} -> {best}");
        // every minibatch drew the same number of samples from each state
        assert_eq!(r.samples_per_state[0].1, r.samples_per_state[1].1);
        assert_eq!(r.samples_per_state[0].1, r.minibatches * 32);
    }

    #[test]
    fn training_reports_plain_mlp_too() {
        let mut rng = RngStream::new(16, 0);
        let set = toy_set(64, 3, &[0.1], &mut rng);
        let mlp = Mlp::random(MlpSpec::new(vec![16, 10, 4, 2], Activation::Tanh), 1.0, &mut rng).unwrap();
        let mut model = FdDpdModel::new(FdNet::Plain(mlp), 7, TapBoundary::Circular, 8.0).unwrap();
        let hyper = TrainHyper { epochs: 5, batch_per_state: 16, validation_symbols: 1, ..TrainHyper::default() };
        let r = train_fd_dpd(&mut model, &set, &[1], &hyper, &mut RngStream::new(17, 0)).unwrap();
        assert_eq!(r.val_loss_fd.len(), r.epochs_run);
        assert!(train_fd_dpd(&mut model, &set, &[9], &hyper, &mut RngStream::new(17, 0)).is_err());
    }

    #[test]
    fn exploding_learning_rate_is_reported_as_divergence() {
        let mut rng = RngStream::new(18, 0);
        let set = toy_set(64, 4, &[0.1], &mut rng);
        let mlp = Mlp::random(MlpSpec::new(vec![16, 10, 4, 2], Activation::Tanh), 1.0, &mut rng).unwrap();
        let mut model = FdDpdModel::new(FdNet::Plain(mlp), 7, TapBoundary::Circular, 8.0).unwrap();
        let hyper = TrainHyper {
            epochs: 50,
            batch_per_state: 16,
            adam: AdamConfig { lr: 1e3, ..AdamConfig::default() },
            validation_symbols: 0,
            divergence_factor: 2.0,
            ..TrainHyper::default()
        };
        let r = train_fd_dpd(&mut model, &set, &[1], &hyper, &mut RngStream::new(19, 0));
        assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
    }

    #[test]
    fn checkpoint_keeps_tap_settings() {
        let mut rng = RngStream::new(20, 0);
        let model = FdDpdModel::new(FdNet::Hn(small_hn(1, &mut rng)), 7, TapBoundary::Zero, 12.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        assert_eq!(FdDpdModel::load(&path, None).unwrap(), model);
    }
}
