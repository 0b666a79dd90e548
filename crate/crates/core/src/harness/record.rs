//! Run records: per-epoch metrics rows, terminal status and run metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::Result;

/// Column order of every metrics CSV.
pub const METRICS_COLUMNS: [&str; 10] = [
    "run_id",
    "epoch",
    "step",
    "train_loss",
    "val_loss",
    "val_acc",
    "lr",
    "epsilon",
    "clip_norm",
    "sigma",
];

/// Metrics after one completed epoch. `step` counts optimizer steps so far
/// and `epsilon` is the budget spent by them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub step: u64,
    #[serde(with = "crate::harness::float_serde")]
    pub train_loss: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub val_loss: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub val_acc: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub lr: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub epsilon: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub clip_norm: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    EarlyStopped { epoch: usize },
    Diverged { step: u64, loss: f64 },
    Error { step: u64, detail: String },
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::EarlyStopped { .. } => "early-stopped",
            RunStatus::Diverged { .. } => "diverged",
            RunStatus::Error { .. } => "error",
        }
    }
}

/// Everything about a run that is not a per-epoch row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub status: RunStatus,
    pub private: bool,
    pub epochs_completed: usize,
    pub total_steps: u64,
    pub best_epoch: Option<usize>,
    #[serde(with = "crate::harness::float_serde")]
    pub best_val_loss: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub best_val_acc: f64,
    /// Test accuracy of the parameters at the end of the run.
    #[serde(with = "crate::harness::float_serde")]
    pub test_acc: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub test_loss: f64,
    /// Test accuracy of the checkpoint with the best validation loss.
    #[serde(with = "crate::harness::float_serde")]
    pub best_checkpoint_test_acc: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub final_epsilon: f64,
    pub epsilon_order: Option<u32>,
    #[serde(with = "crate::harness::float_serde")]
    pub delta: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub sampling_rate: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub noise_multiplier: f64,
    pub sigma_calibrated: bool,
    pub param_count: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Per-channel statistics of the training split, applied to every split.
    pub normalization: Normalization,
    pub caveats: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<MetricsRow>,
    pub metadata: RunMetadata,
    /// The resolved configuration text.
    pub config: String,
}

impl RunRecord {
    pub fn run_id(&self) -> &str {
        &self.metadata.run_id
    }

    pub fn status(&self) -> &RunStatus {
        &self.metadata.status
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    // Headers are written by hand so that an empty run still has them.
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}
