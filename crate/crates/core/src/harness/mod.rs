//! Experiment orchestration: config parsing, the file-phased pipeline and
//! report output.

mod config;
mod pipeline;
mod report;

pub use config::{
    ArrayConfig, DataConfig, EqualizationMode, EvalConfig, ExperimentConfig, FrameConfig, NnConfig, NoiseSection,
    PaConfig, PsdConfig, StatesConfig, TdConfig,
};
pub use pipeline::{run_gradcheck, CascadeRow, GradCheckSummary, Phase, Pipeline, Scenario};
pub use report::{ReportRow, RunReport, METHODS};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DPDLAB_SEED";
