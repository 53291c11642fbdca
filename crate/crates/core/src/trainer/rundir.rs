//! Run directory layout:
//!
//! ```text
//! config.toml            training config snapshot
//! history.jsonl          one line per epoch
//! checkpoint-best.bin    lowest mean training loss
//! checkpoint-final.bin   after the last epoch
//! metrics.json           evaluation report
//! metrics.txt            the same, human readable
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{EpochStats, TrainConfig, TrainError, TrainOutcome};
use crate::evalstats::MetricsReport;
use crate::tcrnet::{load_checkpoint, save_checkpoint, TcrNetParams};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint-best.bin")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint-final.bin")
    }

    pub fn write_config(&self, config: &TrainConfig) -> Result<(), TrainError> {
        fs::write(self.config_path(), config.to_toml())?;
        // a fresh run starts a fresh history
        fs::write(self.history_path(), "")?;
        Ok(())
    }

    pub fn read_config(&self) -> Result<TrainConfig, TrainError> {
        TrainConfig::from_toml(&fs::read_to_string(self.config_path())?)
    }

    pub fn append_history(&self, stats: &EpochStats) -> Result<(), TrainError> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.history_path())?;
        writeln!(f, "{}", serde_json::to_string(stats).expect("stats serialize"))?;
        Ok(())
    }

    pub fn read_history(&self) -> Result<Vec<EpochStats>, TrainError> {
        fs::read_to_string(self.history_path())?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::InvalidConfig(format!("history: {e}"))))
            .collect()
    }

    pub fn write_checkpoints(&self, outcome: &TrainOutcome) -> Result<(), TrainError> {
        save_checkpoint(self.best_checkpoint(), &outcome.best_params)?;
        save_checkpoint(self.final_checkpoint(), &outcome.final_params)?;
        Ok(())
    }

    pub fn load_final(&self) -> Result<TcrNetParams, TrainError> {
        Ok(load_checkpoint(self.final_checkpoint())?)
    }

    /// Writes `metrics.json` and `metrics.txt`.
    pub fn write_metrics(&self, report: &MetricsReport) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        fs::write(self.root.join("metrics.json"), json + "\n")?;
        fs::write(self.root.join("metrics.txt"), report.to_string())?;
        Ok(())
    }
}
