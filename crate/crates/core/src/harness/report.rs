use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::waveform::StateGrid;

pub const METHODS: [&str; 4] = ["no-dpd", "fd-nn", "hn-fd-nn", "td-dpd"];

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub state_id: u32,
    pub bw_mhz: f64,
    pub p_dbm: f64,
    pub method: String,
    pub evm_pct: f64,
    pub tx_nmse_db: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn get(&self, state_id: u32, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.state_id == state_id && r.method == method)
    }

    /// Every state of `grid` paired with every method exactly once.
    pub fn check_complete(&self, grid: &StateGrid) -> Result<()> {
        for s in grid.states() {
            for m in METHODS {
                let n = self.rows.iter().filter(|r| r.state_id == s.id && r.method == m).count();
                if n != 1 {
                    return Err(Error::invalid(format!("report has {n} rows for state {} / {m}", s.id)));
                }
            }
        }
        if self.rows.len() != grid.states().len() * METHODS.len() {
            return Err(Error::invalid("report holds rows outside the state grid"));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(RunReport { rows })
    }
}
