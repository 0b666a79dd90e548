//! Clipping-norm sweeps: deterministic grid or seeded random search over
//! clip norms × epoch budgets × repeats, summarized by validation accuracy.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::record::RunRecord;
use crate::harness::train::run_training;

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Grid,
    /// Log-uniform draws from `clip_range`.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub mode: SearchMode,
    pub clip_norms: Vec<f64>,
    pub clip_range: (f64, f64),
    pub points: usize,
    pub epochs: Vec<usize>,
    pub repeats: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        match self.mode {
            SearchMode::Grid => {
                if self.clip_norms.is_empty() || !self.clip_norms.iter().all(|&c| positive(c)) {
                    return Err(Error::Config(format!(
                        "sweep clip grid {:?} must be non-empty and positive",
                        self.clip_norms
                    )));
                }
            }
            SearchMode::Random => {
                let (lo, hi) = self.clip_range;
                if !(positive(lo) && positive(hi) && lo <= hi) || self.points == 0 {
                    return Err(Error::Config(format!(
                        "random sweep needs 0 < lo <= hi and points > 0, got {:?} and {}",
                        self.clip_range, self.points
                    )));
                }
            }
        }
        if self.epochs.is_empty() || self.epochs.contains(&0) {
            return Err(Error::Config(format!(
                "sweep epochs {:?} must be non-empty and positive",
                self.epochs
            )));
        }
        if self.repeats == 0 || self.top_k == 0 {
            return Err(Error::Config("sweep repeats and top_k must be positive".into()));
        }
        Ok(())
    }

    /// The clip norms searched, in enumeration order.
    pub fn clip_values(&self) -> Vec<f64> {
        match self.mode {
            SearchMode::Grid => self.clip_norms.clone(),
            SearchMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let (lo, hi) = (self.clip_range.0.ln(), self.clip_range.1.ln());
                (0..self.points)
                    .map(|_| {
                        if lo == hi {
                            lo.exp()
                        } else {
                            rng.gen_range(lo..hi).exp()
                        }
                    })
                    .collect()
            }
        }
    }
}

/// One run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub run_id: String,
    pub clip_norm: f64,
    pub epochs: usize,
    pub repeat: usize,
    pub seed: u64,
}

/// Clip-major enumeration; repeat `r` uses seed `base + r`, so a single-point
/// sweep reproduces the base run.
pub fn sweep_points(sweep: &SweepConfig, base: &RunConfig) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for (ci, &clip_norm) in sweep.clip_values().iter().enumerate() {
        for &epochs in &sweep.epochs {
            for repeat in 0..sweep.repeats {
                out.push(SweepPoint {
                    run_id: format!("{}-p{ci}-e{epochs}-r{repeat}", base.run_id),
                    clip_norm,
                    epochs,
                    repeat,
                    seed: base.seed.wrapping_add(repeat as u64),
                });
            }
        }
    }
    out
}

/// The run configuration of one sweep point. Runs are written below
/// `<output_dir>/<base id>/`.
pub fn point_config(base: &RunConfig, point: &SweepPoint) -> RunConfig {
    let mut cfg = base.clone();
    cfg.run_id = point.run_id.clone();
    cfg.seed = point.seed;
    cfg.epochs = point.epochs;
    cfg.dp.clip_norm = point.clip_norm;
    cfg.output_dir = base.output_dir.join(&base.run_id);
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub rank: usize,
    pub run_id: String,
    pub clip_norm: f64,
    pub epochs: usize,
    pub repeat: usize,
    pub seed: u64,
    pub status: String,
    pub best_val_acc: f64,
    pub best_epoch: Option<usize>,
    pub final_epsilon: f64,
    pub test_acc: f64,
    pub top_k: bool,
}

pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    /// One entry per point; a failed run keeps its error message.
    pub runs: Vec<std::result::Result<RunRecord, String>>,
    pub summary: Vec<SummaryRow>,
}

/// Ranks runs by best validation accuracy, highest first. Failed runs and
/// runs without a validated epoch sort last; ties keep enumeration order.
pub fn summarize(
    points: &[SweepPoint],
    runs: &[std::result::Result<RunRecord, String>],
    top_k: usize,
) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = points
        .iter()
        .zip(runs)
        .map(|(p, r)| {
            let (status, best_val_acc, best_epoch, final_epsilon, test_acc) = match r {
                Ok(rec) => {
                    let m = &rec.metadata;
                    (
                        m.status.name().to_string(),
                        m.best_val_acc,
                        m.best_epoch,
                        m.final_epsilon,
                        m.test_acc,
                    )
                }
                Err(_) => ("error".into(), f64::NAN, None, f64::NAN, f64::NAN),
            };
            SummaryRow {
                rank: 0,
                run_id: p.run_id.clone(),
                clip_norm: p.clip_norm,
                epochs: p.epochs,
                repeat: p.repeat,
                seed: p.seed,
                status,
                best_val_acc,
                best_epoch,
                final_epsilon,
                test_acc,
                top_k: false,
            }
        })
        .collect();
    let key = |r: &SummaryRow| {
        if r.best_val_acc.is_nan() {
            f64::NEG_INFINITY
        } else {
            r.best_val_acc
        }
    };
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
        r.top_k = i < top_k;
    }
    rows
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every sweep point in order and writes `summary.csv` next to the
/// runs. A failing run is recorded and the sweep continues.
pub fn run_sweep(sweep: &SweepConfig, base: &RunConfig) -> Result<SweepOutcome> {
    run_sweep_with(sweep, base, &mut |_, _| {})
}

/// As [`run_sweep`], calling `observe` after each run.
pub fn run_sweep_with(
    sweep: &SweepConfig,
    base: &RunConfig,
    observe: &mut dyn FnMut(&SweepPoint, &std::result::Result<RunRecord, String>),
) -> Result<SweepOutcome> {
    sweep.validate()?;
    base.validate()?;
    let points = sweep_points(sweep, base);
    let mut runs = Vec::with_capacity(points.len());
    for p in &points {
        let r = run_training(&point_config(base, p)).map_err(|e| e.to_string());
        observe(p, &r);
        runs.push(r);
    }
    let summary = summarize(&points, &runs, sweep.top_k);
    let dir = base.output_dir.join(&base.run_id);
    std::fs::create_dir_all(&dir)?;
    write_summary_csv(&summary, &dir.join(SUMMARY_FILE))?;
    Ok(SweepOutcome {
        points,
        runs,
        summary,
    })
}
