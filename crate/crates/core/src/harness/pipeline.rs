use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EqualizationMode, ExperimentConfig};
use super::report::{ReportRow, RunReport, METHODS};
use crate::error::{Error, Result};
use crate::fddpd::{fd_dpd_infer, gen_targets, train_fd_dpd, FdDpdModel, FdNet, StateRecord, TrainReport, TrainingSet};
use crate::metrics::{branch_sum_psd, error_psd, Equalization, EvmAccumulator, NmseAccumulator, PsdEstimate};
use crate::mimo::{apply_precoding, los_channel, normalize_power, receive, zf_precoder, ChannelModel, ChannelParams, Precoder, UserGeometry};
use crate::nn::{grad_check, Gradients, HnFdnnModel, Mlp, MlpSpec};
use crate::numerics::{stream_key, CMat, Complex64, RngStream};
use crate::pa::{synth_pa_array, MpArray};
use crate::tddpd::{fit_td_dpd, td_dpd_apply, TdDpdModel};
use crate::waveform::{
    build_subcarrier_mask, fd_to_td, gen_fd_symbols, make_state_vector, td_to_fd, FdSymbolMatrix, SignalState,
    StateGrid, SubcarrierMask, TdFrame,
};

const D_CHANNEL: u16 = 1;
const D_PA: u16 = 2;
const D_PROBE: u16 = 3;
const D_TRAIN: u16 = 4;
const D_EVAL: u16 = 5;
const D_NOISE: u16 = 6;
const D_HN_INIT: u16 = 7;
const D_HN_SHUFFLE: u16 = 8;
const D_FDNN_INIT: u16 = 9;
const D_FDNN_SHUFFLE: u16 = 10;
const D_PSD: u16 = 11;
const D_GRADCHECK: u16 = 12;

const MANIFEST: &str = "manifest.json";
const SCENARIO: &str = "scenario.json";
const PA_FILE: &str = "pa.json";
const TDDPD_FILE: &str = "tddpd.json";
const TARGETS_DIR: &str = "targets";
const HN_FILE: &str = "hn_fdnn.json";
const HN_LOG: &str = "train_hn.json";
const FDNN_FILE: &str = "fdnn.json";
const FDNN_LOG: &str = "train_fdnn.json";
const REPORT_CSV: &str = "report.csv";
const REPORT_JSON: &str = "report.json";
const PSD_CSV: &str = "psd.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Gen,
    TrainTd,
    Targets,
    TrainHn,
    TrainFdnn,
    Eval,
    Psd,
}

impl Phase {
    pub const ALL: [Phase; 7] =
        [Phase::Gen, Phase::TrainTd, Phase::Targets, Phase::TrainHn, Phase::TrainFdnn, Phase::Eval, Phase::Psd];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Gen => "gen",
            Phase::TrainTd => "train-td",
            Phase::Targets => "targets",
            Phase::TrainHn => "train-hn",
            Phase::TrainFdnn => "train-fdnn",
            Phase::Eval => "eval",
            Phase::Psd => "psd",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    name: String,
    config_hash: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    /// U rows of B `[re, im]` pairs.
    h: Vec<Vec<[f64; 2]>>,
    geometry: Vec<UserGeometry>,
    params: ChannelParams,
}

/// Channel and PA array shared by every later phase.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub channel: ChannelModel,
    pub precoder: Precoder,
    pub pa: MpArray,
}

/// Per-state constants used when building OFDM symbols.
struct StateCtx {
    state: SignalState,
    mask: SubcarrierMask,
    c: [f64; 2],
}

/// One precoded symbol: user symbols, the power-normalized branch signal
/// and the scale that produced it.
struct Precoded {
    symbols: FdSymbolMatrix,
    x: TdFrame,
    alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CascadeRow {
    pub state_id: u32,
    pub no_dpd_db: f64,
    pub td_dpd_db: f64,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    hash: String,
    grid: StateGrid,
    verbose: bool,
}

#[derive(Serialize)]
struct EvalJson<'a> {
    config_hash: &'a str,
    seed: u64,
    noise_realizations: usize,
    eval_symbols: usize,
    runtime_s: BTreeMap<&'static str, f64>,
    rows: &'a [ReportRow],
    config: &'a ExperimentConfig,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let out = out.unwrap_or_else(|| cfg.out_dir.clone());
        let hash = cfg.hash();
        Ok(Pipeline { cfg, out, hash, grid, verbose: false })
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{}] {}", self.cfg.name, msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn rng(&self, domain: u16, a: u32, b: u32) -> RngStream {
        RngStream::new(self.cfg.seed, stream_key(domain, a, b))
    }

    pub fn run(&self, phases: &[Phase]) -> Result<()> {
        for &p in phases {
            let t0 = Instant::now();
            self.log(format!("phase {} ...", p.name()));
            match p {
                Phase::Gen => self.gen()?,
                Phase::TrainTd => self.train_td()?,
                Phase::Targets => self.targets()?,
                Phase::TrainHn => {
                    self.train_hn()?;
                }
                Phase::TrainFdnn => {
                    self.train_fdnn()?;
                }
                Phase::Eval => {
                    self.eval()?;
                }
                Phase::Psd => self.psd()?,
            }
            self.log(format!("phase {} done in {:.1} s", p.name(), t0.elapsed().as_secs_f64()));
        }
        Ok(())
    }

    pub fn run_all(&self) -> Result<()> {
        self.run(&Phase::ALL)
    }

    fn require(&self, name: &str, phase: Phase) -> Result<PathBuf> {
        let manifest = self.path(MANIFEST);
        if !manifest.exists() {
            return Err(Error::Prerequisite { path: manifest, phase: Phase::Gen.name().into() });
        }
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest)?)
            .map_err(|e| Error::Format { path: manifest.clone(), reason: e.to_string() })?;
        if m.config_hash != self.hash {
            return Err(Error::ConfigMismatch(manifest));
        }
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Prerequisite { path: p, phase: phase.name().into() });
        }
        Ok(p)
    }

    fn ctx(&self, state: SignalState) -> Result<StateCtx> {
        let f = &self.cfg.frame;
        Ok(StateCtx {
            state,
            mask: build_subcarrier_mask(f.n, f.fs_mhz, state.bandwidth_mhz)?,
            c: make_state_vector(&state, &self.grid)?,
        })
    }

    /// Fixed scale bringing TD user samples of the widest state to unit RMS.
    fn input_scale(&self) -> Result<f64> {
        let f = &self.cfg.frame;
        let widest = build_subcarrier_mask(f.n, f.fs_mhz, self.grid.bw_max_mhz())?;
        Ok(f.n as f64 / (widest.len() as f64).sqrt())
    }

    fn precode(&self, ctx: &StateCtx, p: &Precoder, rng: &mut RngStream) -> Result<Precoded> {
        let symbols = gen_fd_symbols(self.cfg.users(), &ctx.mask, self.cfg.frame.qam_order, rng)?;
        let x = fd_to_td(&apply_precoding(&symbols.symbols, p)?)?;
        let (x, alpha) = normalize_power(&x, ctx.state.rms_power_dbm)?;
        Ok(Precoded { symbols, x, alpha })
    }

    // ---- gen ----

    fn gen(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let a = &self.cfg.array;
        let channel = los_channel(&a.users, &a.channel, a.antennas, &mut self.rng(D_CHANNEL, 0, 0))?;
        let pa = match &self.cfg.pa.file {
            Some(f) => {
                let pa = MpArray::load(f)?;
                if pa.num_branches() != a.antennas {
                    return Err(Error::Config(format!(
                        "{} holds {} branches for {} antennas",
                        f.display(),
                        pa.num_branches(),
                        a.antennas
                    )));
                }
                pa.check_states(self.grid.states())?;
                pa
            }
            None => synth_pa_array(a.antennas, &self.cfg.pa.synth, self.grid.states(), &mut self.rng(D_PA, 0, 0))?,
        };
        let file = ScenarioFile {
            h: (0..channel.users()).map(|u| channel.h.row(u).iter().map(|z| [z.re, z.im]).collect()).collect(),
            geometry: channel.geometry.clone(),
            params: channel.params,
        };
        std::fs::write(self.path(SCENARIO), serde_json::to_string_pretty(&file)?)?;
        pa.save(&self.path(PA_FILE))?;
        let m = Manifest { name: self.cfg.name.clone(), config_hash: self.hash.clone(), seed: self.cfg.seed };
        std::fs::write(self.path(MANIFEST), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load_scenario(&self) -> Result<Scenario> {
        let path = self.require(SCENARIO, Phase::Gen)?;
        let file: ScenarioFile = serde_json::from_str(&std::fs::read_to_string(&path)?)
            .map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
        let rows = file.h.len();
        let cols = file.h.first().map_or(0, |r| r.len());
        if rows != self.cfg.users() || cols != self.cfg.array.antennas || file.h.iter().any(|r| r.len() != cols) {
            return Err(Error::Format { path, reason: "channel shape does not match the config".into() });
        }
        let h = CMat::from_fn(rows, cols, |u, b| Complex64::new(file.h[u][b][0], file.h[u][b][1]));
        let channel = ChannelModel { h, geometry: file.geometry, params: file.params };
        let precoder = zf_precoder(&channel.h)?;
        let pa = MpArray::load(&self.require(PA_FILE, Phase::Gen)?)?;
        Ok(Scenario { channel, precoder, pa })
    }

    // ---- train-td ----

    fn train_td(&self) -> Result<()> {
        let sc = self.load_scenario()?;
        let q = self.cfg.tddpd.probe_symbols;
        let probes = self
            .grid
            .states()
            .par_iter()
            .map(|&state| -> Result<(SignalState, TdFrame)> {
                let ctx = self.ctx(state)?;
                let mut frames = Vec::with_capacity(q);
                for k in 0..q {
                    let mut rng = self.rng(D_PROBE, state.id, k as u32);
                    frames.push(self.precode(&ctx, &sc.precoder, &mut rng)?.x);
                }
                Ok((state, stack(&frames)))
            })
            .collect::<Result<Vec<_>>>()?;
        let model = fit_td_dpd(&sc.pa, &probes, &self.cfg.tddpd.fit())?;
        model.save(&self.path(TDDPD_FILE))
    }

    fn load_tddpd(&self) -> Result<TdDpdModel> {
        TdDpdModel::load(&self.require(TDDPD_FILE, Phase::TrainTd)?)
    }

    /// TX-NMSE of the PA alone and of TD-DPD followed by the PA on
    /// `symbols` evaluation symbols per state, none of them used for fitting.
    pub fn td_cascade(&self, state_ids: &[u32], symbols: usize) -> Result<Vec<CascadeRow>> {
        let sc = self.load_scenario()?;
        let td = self.load_tddpd()?;
        state_ids
            .par_iter()
            .map(|&id| {
                let state = self.grid.get(id).ok_or(Error::UnknownState(id))?;
                let ctx = self.ctx(state)?;
                let (mut no, mut with) = (NmseAccumulator::default(), NmseAccumulator::default());
                for k in 0..symbols {
                    let p = self.precode(&ctx, &sc.precoder, &mut self.rng(D_EVAL, id, k as u32))?;
                    let ideal = p.x.samples().scale(sc.pa.gain);
                    no.add(sc.pa.apply(&p.x, id)?.samples(), &ideal)?;
                    with.add(sc.pa.apply(&td_dpd_apply(&td, &p.x, &state)?, id)?.samples(), &ideal)?;
                }
                Ok(CascadeRow { state_id: id, no_dpd_db: no.db()?, td_dpd_db: with.db()? })
            })
            .collect()
    }

    // ---- targets ----

    fn targets(&self) -> Result<()> {
        let sc = self.load_scenario()?;
        let td = self.load_tddpd()?;
        let q = self.cfg.data.symbols_per_state;
        let ids = self.cfg.target_state_ids();
        let records = ids
            .par_iter()
            .map(|&id| -> Result<StateRecord> {
                let state = self.grid.get(id).ok_or(Error::UnknownState(id))?;
                let ctx = self.ctx(state)?;
                let pairs = (0..q)
                    .into_par_iter()
                    .map(|k| -> Result<(CMat, CMat)> {
                        let mut rng = self.rng(D_TRAIN, id, k as u32);
                        let p = self.precode(&ctx, &sc.precoder, &mut rng)?;
                        let x2 = td_dpd_apply(&td, &p.x, &state)?;
                        let tar = gen_targets(&x2, &sc.precoder.with_alpha(p.alpha))?;
                        Ok((p.symbols.symbols, tar))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (inputs, targets) = pairs.into_iter().unzip();
                Ok(StateRecord { state, c: ctx.c, inputs, targets })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = TrainingSet { n: self.cfg.frame.n, users: self.cfg.users(), records };
        set.save_dir(&self.path(TARGETS_DIR))
    }

    fn load_targets(&self, ids: &[u32]) -> Result<TrainingSet> {
        let dir = self.require(TARGETS_DIR, Phase::Targets)?;
        TrainingSet::load_dir(&dir, ids)
    }

    // ---- training ----

    fn train_model(
        &self,
        net: FdNet,
        ids: &[u32],
        shuffle: RngStream,
        hyper: &crate::fddpd::TrainHyper,
        file: &str,
        log: &str,
    ) -> Result<TrainReport> {
        let set = self.load_targets(ids)?;
        let nn = &self.cfg.nn;
        let mut model = FdDpdModel::new(net, nn.memory, nn.boundary, self.input_scale()?)?;
        let mut rng = shuffle;
        let report = train_fd_dpd(&mut model, &set, ids, hyper, &mut rng)?;
        self.log(format!(
            "{file}: FD loss {:.4e} -> {:.4e} after {} epochs (best {})",
            report.initial_loss_fd,
            report.val_loss_fd.get(report.best_epoch.saturating_sub(1)).copied().unwrap_or(f64::NAN),
            report.epochs_run,
            report.best_epoch
        ));
        model
            .to_checkpoint(None)
            .with_meta("config_hash", self.hash.as_str())
            .save(&self.path(file))?;
        std::fs::write(self.path(log), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    fn train_hn(&self) -> Result<TrainReport> {
        let nn = &self.cfg.nn;
        let net = HnFdnnModel::random(nn.main.clone(), nn.hn.clone(), &mut self.rng(D_HN_INIT, 0, 0))?;
        self.train_model(
            FdNet::Hn(net),
            &self.cfg.states.training_ids,
            self.rng(D_HN_SHUFFLE, 0, 0),
            &self.cfg.train,
            HN_FILE,
            HN_LOG,
        )
    }

    fn train_fdnn(&self) -> Result<TrainReport> {
        let net = Mlp::random(self.cfg.nn.fdnn_spec().clone(), 1.0, &mut self.rng(D_FDNN_INIT, 0, 0))?;
        self.train_model(
            FdNet::Plain(net),
            &[self.cfg.states.fdnn_state],
            self.rng(D_FDNN_SHUFFLE, 0, 0),
            self.cfg.fdnn_hyper(),
            FDNN_FILE,
            FDNN_LOG,
        )
    }

    fn load_fd_model(&self, file: &str, phase: Phase, spec: &MlpSpec) -> Result<FdDpdModel> {
        FdDpdModel::load(&self.require(file, phase)?, Some(spec))
    }

    // ---- eval ----

    /// Transmitted branch signal for `method`, before the PA.
    fn drive(
        &self,
        method: &str,
        p: &Precoded,
        ctx: &StateCtx,
        sc: &Scenario,
        td: &TdDpdModel,
        hn: &FdDpdModel,
        fdnn: &FdDpdModel,
    ) -> Result<TdFrame> {
        let fd_path = |m: &FdDpdModel| -> Result<TdFrame> {
            let s2 = fd_dpd_infer(m, &p.symbols.symbols, &ctx.c)?;
            fd_to_td(&apply_precoding(&s2, &sc.precoder.with_alpha(p.alpha))?)
        };
        match method {
            "no-dpd" => Ok(p.x.clone()),
            "td-dpd" => td_dpd_apply(td, &p.x, &ctx.state),
            "hn-fd-nn" => fd_path(hn),
            "fd-nn" => fd_path(fdnn),
            other => Err(Error::invalid(format!("unknown method {other}"))),
        }
    }

    fn load_models(&self) -> Result<(Scenario, TdDpdModel, FdDpdModel, FdDpdModel)> {
        let sc = self.load_scenario()?;
        let td = self.load_tddpd()?;
        let hn = self.load_fd_model(HN_FILE, Phase::TrainHn, &self.cfg.nn.main)?;
        let fdnn = self.load_fd_model(FDNN_FILE, Phase::TrainFdnn, self.cfg.nn.fdnn_spec())?;
        Ok((sc, td, hn, fdnn))
    }

    /// Evaluates all methods on all states and writes `report.csv` and
    /// `report.json`.
    pub fn eval(&self) -> Result<RunReport> {
        let (sc, td, hn, fdnn) = self.load_models()?;
        let noise = self.cfg.noise();
        let ev = &self.cfg.eval;
        let per_state = self
            .grid
            .states()
            .par_iter()
            .map(|&state| -> Result<Vec<(ReportRow, f64)>> {
                let ctx = self.ctx(state)?;
                let symbols: Vec<Precoded> = (0..ev.symbols)
                    .map(|k| self.precode(&ctx, &sc.precoder, &mut self.rng(D_EVAL, state.id, k as u32)))
                    .collect::<Result<_>>()?;
                let mut rows = Vec::with_capacity(METHODS.len());
                for method in METHODS {
                    let t0 = Instant::now();
                    let mut evm = EvmAccumulator::default();
                    let mut nmse = NmseAccumulator::default();
                    for (k, p) in symbols.iter().enumerate() {
                        let drive = self.drive(method, p, &ctx, &sc, &td, &hn, &fdnn)?;
                        let out = sc.pa.apply(&drive, state.id)?;
                        let ideal = p.x.samples().scale(sc.pa.gain);
                        nmse.add(out.samples(), &ideal)?;
                        let out_fd = td_to_fd(&out)?;
                        let eq = match ev.equalization {
                            EqualizationMode::KnownGain => Equalization::KnownGain(sc.pa.gain * p.alpha),
                            EqualizationMode::LsScalar => Equalization::LsScalar,
                        };
                        for r in 0..ev.noise_realizations {
                            // same noise draws for every method
                            let mut rng = self.rng(D_NOISE, state.id, (k * ev.noise_realizations + r) as u32);
                            let y = receive(&out_fd, &sc.channel, &noise, &ctx.mask, &mut rng)?;
                            evm.add(&y, &p.symbols, eq)?;
                        }
                    }
                    rows.push((
                        ReportRow {
                            state_id: state.id,
                            bw_mhz: state.bandwidth_mhz,
                            p_dbm: state.rms_power_dbm,
                            method: method.to_string(),
                            evm_pct: evm.report()?.aggregate_pct,
                            tx_nmse_db: nmse.db()?,
                            seed: self.cfg.seed,
                            config_hash: self.hash.clone(),
                        },
                        t0.elapsed().as_secs_f64(),
                    ));
                }
                Ok(rows)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut runtime: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut rows = Vec::new();
        for state_rows in per_state {
            for (row, secs) in state_rows {
                let key = METHODS.iter().find(|m| **m == row.method).expect("known method");
                *runtime.entry(key).or_default() += secs;
                rows.push(row);
            }
        }
        let report = RunReport { rows };
        report.check_complete(&self.grid)?;
        report.write_csv(&self.path(REPORT_CSV))?;
        let json = EvalJson {
            config_hash: &self.hash,
            seed: self.cfg.seed,
            noise_realizations: ev.noise_realizations,
            eval_symbols: ev.symbols,
            runtime_s: runtime,
            rows: &report.rows,
            config: &self.cfg,
        };
        std::fs::write(self.path(REPORT_JSON), serde_json::to_string_pretty(&json)?)?;
        if self.verbose {
            for r in &report.rows {
                self.log(format!(
                    "state {:>2} ({:>4} MHz, {:>5} dBm) {:<9} EVM {:6.3} %  TX-NMSE {:7.2} dB",
                    r.state_id, r.bw_mhz, r.p_dbm, r.method, r.evm_pct, r.tx_nmse_db
                ));
            }
        }
        Ok(report)
    }

    pub fn report_path(&self) -> PathBuf {
        self.path(REPORT_CSV)
    }

    pub fn psd_path(&self) -> PathBuf {
        self.path(PSD_CSV)
    }

    // ---- psd ----

    fn psd(&self) -> Result<()> {
        let (sc, td, hn, fdnn) = self.load_models()?;
        let id = self.cfg.states.showcase_state;
        let state = self.grid.get(id).ok_or(Error::UnknownState(id))?;
        let ctx = self.ctx(state)?;
        let symbols: Vec<Precoded> = (0..self.cfg.psd.symbols)
            .map(|k| self.precode(&ctx, &sc.precoder, &mut self.rng(D_PSD, id, k as u32)))
            .collect::<Result<_>>()?;
        let fs = self.cfg.frame.fs_mhz * 1e6;
        let welch = self.cfg.psd.welch();
        let ideal = stack(&symbols.iter().map(|p| TdFrame(p.x.samples().scale(sc.pa.gain))).collect::<Vec<_>>());
        let mut columns: Vec<(String, PsdEstimate)> = vec![("ideal".into(), branch_sum_psd(ideal.samples(), fs, &welch)?)];
        for method in METHODS {
            let outs = symbols
                .iter()
                .map(|p| {
                    let d = self.drive(method, p, &ctx, &sc, &td, &hn, &fdnn)?;
                    sc.pa.apply(&d, id)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = stack(&outs);
            columns.push((format!("{method}_out"), branch_sum_psd(out.samples(), fs, &welch)?));
            columns.push((format!("{method}_err"), error_psd(&out, &ideal, fs, &welch)?));
        }
        let mut w = csv::Writer::from_path(self.path(PSD_CSV))?;
        let mut header = vec!["freq_mhz".to_string()];
        header.extend(columns.iter().map(|c| c.0.clone()));
        w.write_record(&header)?;
        let dbs: Vec<Vec<f64>> = columns.iter().map(|c| c.1.density_dbm_hz()).collect();
        for (i, f) in columns[0].1.freqs_hz.iter().enumerate() {
            let mut rec = vec![format!("{}", f / 1e6)];
            rec.extend(dbs.iter().map(|d| format!("{:.4}", d[i])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Concatenates frames along time.
fn stack(frames: &[TdFrame]) -> TdFrame {
    let cols = frames[0].streams();
    let mut data = Vec::with_capacity(frames.iter().map(|f| f.n()).sum::<usize>() * cols);
    for f in frames {
        data.extend_from_slice(f.samples().as_slice());
    }
    let rows = data.len() / cols;
    TdFrame(CMat::from_row_major(rows, cols, data).expect("sized"))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub topology: String,
    pub seeds: usize,
    pub max_rel_err: f64,
}

/// Gradient check of the configured HN FD-NN and FD-NN over `seeds`
/// random initializations.
pub fn run_gradcheck(cfg: &ExperimentConfig, seeds: usize, max_params: Option<usize>) -> Result<Vec<GradCheckSummary>> {
    let nn = &cfg.nn;
    let mut out = Vec::new();
    let batch = 4;
    let check = |seed: u64, hn: bool| -> Result<f64> {
        let mut rng = RngStream::new(cfg.seed, stream_key(D_GRADCHECK, seed as u32, hn as u32));
        let spec = if hn { &nn.main } else { nn.fdnn_spec() };
        let x: Vec<f64> = (0..batch * spec.input_dim()).map(|_| rng.gaussian()).collect();
        let t: Vec<f64> = (0..batch * spec.output_dim()).map(|_| 0.5 * rng.gaussian()).collect();
        let c = [rng.uniform(), rng.uniform()];
        let report = if hn {
            let mut m = HnFdnnModel::random(nn.main.clone(), nn.hn.clone(), &mut rng)?;
            // full-size emitted layer so the hypernetwork path is exercised
            for w in &mut m.hn.layers.last_mut().expect("layers").weights {
                *w *= 100.0;
            }
            let mut g = Gradients::zeros_like(&m);
            crate::nn::ConditionedNet::accumulate_gradients(&m, &x, batch, &c, &t, &mut g)?;
            grad_check(&m, &x, batch, &c, &t, &g, 1e-6, max_params, &mut rng)?
        } else {
            let m = Mlp::random(spec.clone(), 1.0, &mut rng)?;
            let mut g = Gradients::zeros_like(&m);
            crate::nn::ConditionedNet::accumulate_gradients(&m, &x, batch, &c, &t, &mut g)?;
            grad_check(&m, &x, batch, &c, &t, &g, 1e-6, max_params, &mut rng)?
        };
        Ok(report.max_rel_err)
    };
    for hn in [true, false] {
        let errs = (0..seeds as u64).into_par_iter().map(|s| check(s, hn)).collect::<Result<Vec<f64>>>()?;
        let topology = if hn {
            format!("main {} / hn {}", nn.main.describe(), nn.hn.describe())
        } else {
            format!("fd-nn {}", nn.fdnn_spec().describe())
        };
        out.push(GradCheckSummary { topology, seeds, max_rel_err: errs.into_iter().fold(0.0, f64::max) });
    }
    Ok(out)
}
