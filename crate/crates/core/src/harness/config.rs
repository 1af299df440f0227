use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fddpd::{tap_dim, TapBoundary, TrainHyper};
use crate::metrics::{WelchConfig, Window};
use crate::mimo::{ChannelParams, NoiseConfig, UserGeometry};
use crate::nn::{HnFdnnModel, MlpSpec};
use crate::pa::PaSynthSpec;
use crate::tddpd::TdDpdConfig;
use crate::waveform::{build_subcarrier_mask, SignalState, StateGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    pub n: usize,
    pub fs_mhz: f64,
    pub qam_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub antennas: usize,
    /// One entry per user.
    pub users: Vec<UserGeometry>,
    #[serde(default)]
    pub channel: ChannelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatesConfig {
    /// Defaults to the eleven-state grid.
    #[serde(default)]
    pub grid: Option<Vec<SignalState>>,
    pub training_ids: Vec<u32>,
    /// State the single-state FD-NN baseline is trained on.
    pub fdnn_state: u32,
    /// State whose spectra the `psd` phase records.
    pub showcase_state: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaConfig {
    /// Coefficient file to use instead of the synthetic array.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub synth: PaSynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdConfig {
    pub iterations: usize,
    pub ridge: f64,
    /// Memory depth and order; the PA's own per state when absent.
    #[serde(default)]
    pub memory: Option<usize>,
    #[serde(default)]
    pub order: Option<usize>,
    /// OFDM symbols concatenated into each state's ILA probe.
    pub probe_symbols: usize,
}

impl TdConfig {
    pub fn fit(&self) -> TdDpdConfig {
        TdDpdConfig { iterations: self.iterations, ridge: self.ridge, memory: self.memory, order: self.order }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnConfig {
    pub memory: usize,
    #[serde(default)]
    pub boundary: TapBoundary,
    pub main: MlpSpec,
    pub hn: MlpSpec,
    /// Baseline topology; the main spec when absent.
    #[serde(default)]
    pub fdnn: Option<MlpSpec>,
}

impl NnConfig {
    pub fn fdnn_spec(&self) -> &MlpSpec {
        self.fdnn.as_ref().unwrap_or(&self.main)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training symbols per state (`Q`).
    pub symbols_per_state: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EqualizationMode {
    KnownGain,
    LsScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub symbols: usize,
    pub noise_realizations: usize,
    pub equalization: EqualizationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub enabled: bool,
    pub psd_dbm_hz: f64,
    pub noise_figure_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsdConfig {
    pub symbols: usize,
    pub segment: usize,
    pub overlap: f64,
    pub window: Window,
}

impl PsdConfig {
    pub fn welch(&self) -> WelchConfig {
        WelchConfig { segment: self.segment, overlap: self.overlap, window: self.window }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub frame: FrameConfig,
    pub array: ArrayConfig,
    pub states: StatesConfig,
    pub pa: PaConfig,
    pub tddpd: TdConfig,
    pub nn: NnConfig,
    pub data: DataConfig,
    pub train: TrainHyper,
    /// Overrides for the baseline; `train` when absent.
    #[serde(default)]
    pub train_fdnn: Option<TrainHyper>,
    pub eval: EvalConfig,
    pub noise: NoiseSection,
    pub psd: PsdConfig,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; a relative PA file path is resolved
    /// against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| cfg_err(format!("{}: {}", path.display(), e.to_string().trim_start_matches("configuration error: "))))?;
        if let Some(f) = &cfg.pa.file {
            if f.is_relative() {
                cfg.pa.file = Some(path.parent().unwrap_or(Path::new(".")).join(f));
            }
        }
        Ok(cfg)
    }

    pub fn users(&self) -> usize {
        self.array.users.len()
    }

    pub fn grid(&self) -> Result<StateGrid> {
        match &self.states.grid {
            None => StateGrid::new(StateGrid::default_eleven().states().to_vec(), self.states.training_ids.clone()),
            Some(g) => StateGrid::new(g.clone(), self.states.training_ids.clone()),
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            noise_psd_dbm_hz: self.noise.psd_dbm_hz,
            noise_figure_db: self.noise.noise_figure_db,
            bandwidth_hz: self.frame.fs_mhz * 1e6,
            enabled: self.noise.enabled,
        }
    }

    pub fn fdnn_hyper(&self) -> &TrainHyper {
        self.train_fdnn.as_ref().unwrap_or(&self.train)
    }

    /// Training-set states: the HN states plus the baseline's state.
    pub fn target_state_ids(&self) -> Vec<u32> {
        let mut ids = self.states.training_ids.clone();
        if !ids.contains(&self.states.fdnn_state) {
            ids.push(self.states.fdnn_state);
        }
        ids
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.frame;
        if f.n < 2 || !f.n.is_power_of_two() {
            return Err(cfg_err(format!("frame.n = {} must be a power of two", f.n)));
        }
        if !(f.fs_mhz > 0.0) {
            return Err(cfg_err("frame.fs_mhz must be positive"));
        }
        if ![4, 16, 64].contains(&f.qam_order) {
            return Err(cfg_err(format!("frame.qam_order = {} (use 4, 16 or 64)", f.qam_order)));
        }
        let users = self.users();
        if users == 0 || users > self.array.antennas {
            return Err(cfg_err(format!(
                "need between 1 and array.antennas = {} users, got {users}",
                self.array.antennas
            )));
        }
        let grid = self.grid()?;
        for (what, id) in [("fdnn_state", self.states.fdnn_state), ("showcase_state", self.states.showcase_state)] {
            if grid.get(id).is_none() {
                return Err(cfg_err(format!("states.{what} = {id} is not in the grid")));
            }
        }
        for s in grid.states() {
            build_subcarrier_mask(f.n, f.fs_mhz, s.bandwidth_mhz)
                .map_err(|e| cfg_err(format!("state {}: {e}", s.id)))?;
        }
        self.validate_networks()?;
        if self.pa.file.is_none() {
            self.pa.synth.validate()?;
        }
        if self.tddpd.probe_symbols == 0 || self.tddpd.iterations == 0 {
            return Err(cfg_err("tddpd.probe_symbols and tddpd.iterations must be positive"));
        }
        if self.data.symbols_per_state == 0 || self.eval.symbols == 0 || self.eval.noise_realizations == 0 {
            return Err(cfg_err("data.symbols_per_state, eval.symbols and eval.noise_realizations must be positive"));
        }
        self.train.validate()?;
        self.fdnn_hyper().validate()?;
        if self.train.validation_symbols >= self.data.symbols_per_state {
            return Err(cfg_err("train.validation_symbols must leave at least one training symbol"));
        }
        self.noise().validate()?;
        if self.psd.symbols == 0 || self.psd.symbols * f.n < self.psd.segment || !self.psd.segment.is_power_of_two() {
            return Err(cfg_err("psd.segment must be a power of two no longer than psd.symbols * frame.n"));
        }
        if !(0.0..1.0).contains(&self.psd.overlap) {
            return Err(cfg_err("psd.overlap must lie in [0, 1)"));
        }
        Ok(())
    }

    fn validate_networks(&self) -> Result<()> {
        let (u, m) = (self.users(), self.nn.memory);
        let d1 = tap_dim(m, u);
        if m >= self.frame.n {
            return Err(cfg_err("nn.memory must be shorter than the frame"));
        }
        let check_main = |name: &str, spec: &MlpSpec| -> Result<()> {
            spec.validate(3).map_err(|e| cfg_err(format!("nn.{name}: {e}")))?;
            if spec.input_dim() != d1 {
                return Err(cfg_err(format!(
                    "nn.{name} input width {} must be 2(M+1)U = {d1} for M = {m}, U = {u}",
                    spec.input_dim()
                )));
            }
            if spec.output_dim() != 2 * u {
                return Err(cfg_err(format!("nn.{name} output width {} must be 2U = {}", spec.output_dim(), 2 * u)));
            }
            Ok(())
        };
        check_main("main", &self.nn.main)?;
        check_main("fdnn", self.nn.fdnn_spec())?;
        let need = HnFdnnModel::hn_output_dim(&self.nn.main);
        let hn = &self.nn.hn;
        hn.validate(2).map_err(|e| cfg_err(format!("nn.hn: {e}")))?;
        if hn.input_dim() != 2 {
            return Err(cfg_err(format!("nn.hn input width {} must be 2 (the state vector)", hn.input_dim())));
        }
        if hn.output_dim() != need {
            return Err(cfg_err(format!(
                "nn.hn output width {} must be D_G * D_(G-1) + D_G = {need} for main network {}",
                hn.output_dim(),
                self.nn.main.describe()
            )));
        }
        Ok(())
    }

    /// Short digest of everything that affects results. The output
    /// directory is excluded so the same experiment hashes identically
    /// wherever it runs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
    }

    #[test]
    fn shipped_configs_parse() {
        let p = ExperimentConfig::load(&shipped("paper.cfg")).unwrap();
        assert_eq!((p.frame.n, p.frame.fs_mhz, p.array.antennas), (32768, 200.0, 100));
        let d = ExperimentConfig::load(&shipped("desk.cfg")).unwrap();
        assert_eq!((d.frame.n, d.array.antennas, d.users(), d.seed), (2048, 16, 1, 42));
        assert_eq!(d.grid().unwrap().states().len(), 11);
        assert_eq!(d.states.training_ids.len(), 6);
        let m = ExperimentConfig::load(&shipped("paper_mu.cfg")).unwrap();
        assert_eq!(m.nn.main.layer_sizes, vec![64, 130, 10, 8]);
        assert_eq!(m.nn.hn.layer_sizes, vec![2, 160, 100, 88]);
    }

    fn desk_text() -> String {
        std::fs::read_to_string(shipped("desk.cfg")).unwrap()
    }

    #[test]
    fn wrong_hn_width_rejected() {
        let text = desk_text().replace("[2, 40, 24, 14]", "[2, 40, 24, 13]");
        let e = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(e.to_string().contains("14"), "{e}");
    }

    #[test]
    fn wrong_main_widths_rejected() {
        let text = desk_text().replace("[16, 50, 6, 2]", "[18, 50, 6, 2]");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = desk_text().replace("[16, 50, 6, 2]", "[16, 50, 6, 4]");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_training_state_rejected() {
        let text = desk_text().replace("training_ids = [1, 2, 3, 4, 5, 6]", "training_ids = [1, 2, 3, 4, 5, 12]");
        let e = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(e.to_string().contains("12"), "{e}");
    }

    #[test]
    fn missing_key_rejected() {
        let text = desk_text().replace("qam_order = 16", "");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_parameters() {
        let a = ExperimentConfig::from_toml_str(&desk_text()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.train.adam.lr *= 1.0000001;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed += 1;
        assert_ne!(a.hash(), c.hash());
    }
}
