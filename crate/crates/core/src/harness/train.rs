//! The training loop: DP-SGD (or plain momentum SGD) epochs with per-epoch
//! validation, privacy accounting, early stopping, divergence abort and
//! checkpointing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, epsilon};
use crate::arch::Model;
use crate::data::{
    load_cifar10_binary, make_synthetic, split_train_val, Dataset, Normalization, Sampler,
    SamplingMode, Split,
};
use crate::dp::{private_step, sgd_step, DpConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::{DataSource, RunConfig, DATA_DIR_ENV};
use crate::harness::derive_seed;
use crate::harness::record::{write_metrics_csv, MetricsRow, RunMetadata, RunRecord, RunStatus};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const CONFIG_FILE: &str = "config.resolved";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_FILE: &str = "state.json";

const SEED_SAMPLER: u64 = 1;
const SEED_NOISE: u64 = 2;
const SEED_SPLIT: u64 = 3;
const SEED_TEST: u64 = 4;

const EVAL_CHUNK: usize = 256;

/// How a single step's loss is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Finite,
    /// Strictly above the divergence threshold.
    Diverged,
    NonFinite,
}

pub fn classify_step_loss(loss: f64, threshold: f64) -> StepOutcome {
    if !loss.is_finite() {
        StepOutcome::NonFinite
    } else if loss > threshold {
        StepOutcome::Diverged
    } else {
        StepOutcome::Finite
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStopVerdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience counter on validation loss. An epoch improves when its loss is
/// below the best so far by more than `min_improvement`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    #[serde(with = "crate::harness::float_serde")]
    pub min_improvement: f64,
    #[serde(with = "crate::harness::float_serde")]
    pub best: f64,
    pub streak: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        Self {
            patience,
            min_improvement,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> EarlyStopVerdict {
        if val_loss < self.best - self.min_improvement {
            self.best = val_loss;
            self.streak = 0;
            EarlyStopVerdict::Improved
        } else {
            self.streak += 1;
            if self.streak >= self.patience {
                EarlyStopVerdict::Stop
            } else {
                EarlyStopVerdict::NoImprovement
            }
        }
    }
}

/// Normalized train, validation and test splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

/// Loads or generates the data, splits off validation and normalizes all
/// splits with the training statistics.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let (full, mut test) = match d.source {
        DataSource::Synthetic => (
            make_synthetic(d.classes, d.per_class, d.hw, d.seed)?,
            make_synthetic(
                d.classes,
                d.test_per_class,
                d.hw,
                derive_seed(d.seed, SEED_TEST),
            )?,
        ),
        DataSource::Cifar10 => {
            let dir = std::env::var_os(DATA_DIR_ENV).ok_or_else(|| {
                Error::Config(format!("{DATA_DIR_ENV} must name the CIFAR-10 binary directory"))
            })?;
            load_cifar10_binary(Path::new(&dir))?
        }
    };
    test.split = Split::Test;
    let (train, val) = split_train_val(&full, d.val_fraction, derive_seed(d.seed, SEED_SPLIT))?;
    let normalization = Normalization::from_dataset(&train)?;
    Ok(PreparedData {
        train: normalization.apply(&train)?,
        val: normalization.apply(&val)?,
        test: normalization.apply(&test)?,
        normalization,
    })
}

/// Mean cross-entropy and accuracy of `model` on `ds`. Both are NaN when
/// the dataset is empty or the model produces non-finite values.
pub fn evaluate(model: &Model<f32>, ds: &Dataset) -> Result<(f64, f64)> {
    match evaluate_inner(model, ds) {
        Err(Error::NonFinite { .. }) => Ok((f64::NAN, f64::NAN)),
        other => other,
    }
}

fn evaluate_inner(model: &Model<f32>, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk)?;
        let logits = model.predict(&x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(k).zip(&y) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            loss += lse - row[label] as f64;
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("at least one class");
            correct += (arg == label) as usize;
        }
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// State needed to continue a run after its last completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub next_epoch: usize,
    pub step: u64,
    #[serde(with = "crate::harness::float_serde")]
    pub sigma: f64,
    pub early_stopping: EarlyStopping,
    pub best_epoch: Option<usize>,
    #[serde(with = "crate::harness::float_serde")]
    pub best_val_acc: f64,
    pub rows: Vec<MetricsRow>,
}

/// Privacy parameters fixed for the whole run.
#[derive(Clone, Copy, Debug)]
struct Privacy {
    q: f64,
    sigma: f64,
    delta: f64,
    enabled: bool,
}

impl Privacy {
    /// Spent ε after `steps` steps and the order attaining it.
    fn spent(&self, steps: u64) -> Result<(f64, Option<u32>)> {
        if steps == 0 {
            return Ok((0.0, None));
        }
        if !self.enabled || self.sigma == 0.0 {
            return Ok((f64::INFINITY, None));
        }
        let s = epsilon(self.q, self.sigma, steps, self.delta)?;
        Ok((s.epsilon, Some(s.order)))
    }
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(&cfg.run_id)
}

/// Runs training from scratch and writes the run directory.
pub fn run_training(cfg: &RunConfig) -> Result<RunRecord> {
    run_training_with(cfg, None, &mut |_| {})
}

/// Runs training, optionally continuing from the run directory `resume`,
/// and calls `observe` after every completed epoch.
pub fn run_training_with(
    cfg: &RunConfig,
    resume: Option<&Path>,
    observe: &mut dyn FnMut(&MetricsRow),
) -> Result<RunRecord> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir)?;
    let config_text = cfg.to_config_string();
    fs::write(dir.join(CONFIG_FILE), &config_text)?;

    let mut model: Model<f32> = cfg.architecture.build(cfg.seed)?;
    let sampler = Sampler::new(
        cfg.dp.sampling,
        cfg.optim.lot_size,
        data.train.len(),
        derive_seed(cfg.seed, SEED_SAMPLER),
    )?;
    let q = sampler.sampling_rate();
    let planned_steps = (cfg.epochs * sampler.lots_per_epoch()) as u64;
    let sigma_calibrated = cfg.dp.enabled && cfg.dp.target_epsilon.is_some();
    let sigma = match cfg.dp.target_epsilon {
        Some(target) if cfg.dp.enabled => calibrate_sigma(target, cfg.dp.delta, q, planned_steps)?,
        _ => cfg.dp.noise_multiplier,
    };
    let privacy = Privacy {
        q,
        sigma,
        delta: cfg.dp.delta,
        enabled: cfg.dp.enabled,
    };
    let dp_cfg = DpConfig {
        clip_norm: cfg.dp.clip_norm,
        noise_multiplier: sigma,
        expected_lot_size: cfg.optim.lot_size,
        sampling_rate: q,
        delta: cfg.dp.delta,
        seed: cfg.seed,
    };
    let mut opt = OptimizerState::new(
        &model.params,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
        cfg.optim.schedule.lr_at(0),
    );

    let mut state = ResumeState {
        next_epoch: 0,
        step: 0,
        sigma,
        early_stopping: EarlyStopping::new(cfg.early_stop_patience, cfg.min_improvement),
        best_epoch: None,
        best_val_acc: f64::NAN,
        rows: Vec::new(),
    };
    if let Some(src) = resume {
        let saved: ResumeState = serde_json::from_str(&fs::read_to_string(src.join(STATE_FILE))?)?;
        if saved.sigma != sigma {
            return Err(Error::Config(format!(
                "resumed run used sigma {}, this config gives {sigma}",
                saved.sigma
            )));
        }
        let velocity = load_checkpoint(&src.join(FINAL_CHECKPOINT), &mut model)?
            .ok_or_else(|| Error::Config("resume checkpoint has no momentum buffer".into()))?;
        opt.velocity = velocity;
        // Copying a file onto itself would truncate it.
        let same_dir = fs::canonicalize(src)? == fs::canonicalize(&dir)?;
        if saved.best_epoch.is_some() && !same_dir {
            fs::copy(src.join(BEST_CHECKPOINT), dir.join(BEST_CHECKPOINT))?;
        }
        state = saved;
        for row in &mut state.rows {
            row.run_id = cfg.run_id.clone();
        }
    }

    let noise_seed = derive_seed(cfg.seed, SEED_NOISE);
    let mut status = RunStatus::Completed;
    'epochs: for epoch in state.next_epoch..cfg.epochs {
        opt.lr = cfg.optim.schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for lot in sampler.epoch_lots(epoch) {
            // An empty Poisson lot is still a private step (pure noise), but
            // plain SGD has nothing to do.
            if lot.is_empty() && !cfg.dp.enabled {
                continue;
            }
            state.step += 1;
            let step = state.step;
            let batch = if lot.is_empty() {
                None
            } else {
                Some(data.train.batch(&lot)?)
            };
            let result = if cfg.dp.enabled {
                // The noise stream depends only on (seed, step) so a resumed run
                // draws exactly what an uninterrupted one would.
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                rng.set_stream(step);
                let lot_ref = batch.as_ref().map(|(x, y)| (x, y.as_slice()));
                private_step(&mut model, lot_ref, &dp_cfg, cfg.dp.per_sample, &mut opt, &mut rng)
                    .map(|s| s.loss)
            } else {
                let (x, y) = batch.as_ref().expect("non-empty lot");
                sgd_step(&mut model, x, y, &mut opt)
            };
            let loss = match result {
                Ok(loss) => loss,
                Err(Error::NonFinite { op }) => {
                    status = RunStatus::Error {
                        step,
                        detail: format!("non-finite value in {op}"),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            match classify_step_loss(loss, cfg.divergence_threshold) {
                StepOutcome::Finite => {}
                StepOutcome::Diverged => {
                    status = RunStatus::Diverged { step, loss };
                    break 'epochs;
                }
                StepOutcome::NonFinite => {
                    status = RunStatus::Error {
                        step,
                        detail: format!("non-finite training loss {loss}"),
                    };
                    break 'epochs;
                }
            }
            loss_sum += loss * lot.len() as f64;
            seen += lot.len();
        }

        let (val_loss, val_acc) = evaluate(&model, &data.val)?;
        if !val_loss.is_finite() {
            status = RunStatus::Error {
                step: state.step,
                detail: format!("non-finite validation loss {val_loss}"),
            };
            break;
        }
        let (eps, _) = privacy.spent(state.step)?;
        let row = MetricsRow {
            run_id: cfg.run_id.clone(),
            epoch: epoch + 1,
            step: state.step,
            train_loss: if seen == 0 { f64::NAN } else { loss_sum / seen as f64 },
            val_loss,
            val_acc,
            lr: opt.lr,
            epsilon: eps,
            clip_norm: cfg.dp.clip_norm,
            sigma: if cfg.dp.enabled { sigma } else { 0.0 },
        };
        observe(&row);
        state.rows.push(row);
        state.next_epoch = epoch + 1;
        let verdict = state.early_stopping.update(val_loss);
        if verdict == EarlyStopVerdict::Improved {
            state.best_epoch = Some(epoch + 1);
            state.best_val_acc = val_acc;
            save_checkpoint(&dir.join(BEST_CHECKPOINT), &model, None)?;
        }
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &model, Some(&opt.velocity))?;
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        if verdict == EarlyStopVerdict::Stop {
            status = RunStatus::EarlyStopped { epoch: epoch + 1 };
            break;
        }
    }
    if state.rows.is_empty() {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &model, Some(&opt.velocity))?;
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
    }

    let (test_loss, test_acc) = evaluate(&model, &data.test)?;
    let best_checkpoint_test_acc = if state.best_epoch.is_some() {
        let mut best = model.clone();
        load_checkpoint(&dir.join(BEST_CHECKPOINT), &mut best)?;
        evaluate(&best, &data.test)?.1
    } else {
        test_acc
    };
    let (final_epsilon, epsilon_order) = privacy.spent(state.step)?;

    let mut caveats = vec![format!(
        "delta = {} is a configured assumption; epsilon is only meaningful together with it",
        cfg.dp.delta
    )];
    if cfg.dp.enabled {
        caveats.push(
            "privacy cost of hyperparameter search and of validation-based early stopping \
             is not included in epsilon"
                .into(),
        );
        if cfg.dp.sampling == SamplingMode::ShuffleFixed {
            caveats.push(
                "lots were fixed-size slices of a per-epoch shuffle; the accountant assumes \
                 Poisson subsampling at q = L/N, so epsilon is approximate"
                    .into(),
            );
        }
    } else {
        caveats.push("non-private run: no differential-privacy guarantee".into());
    }

    let metadata = RunMetadata {
        run_id: cfg.run_id.clone(),
        status,
        private: cfg.dp.enabled,
        epochs_completed: state.rows.len(),
        total_steps: state.step,
        best_epoch: state.best_epoch,
        best_val_loss: state.early_stopping.best,
        best_val_acc: state.best_val_acc,
        test_acc,
        test_loss,
        best_checkpoint_test_acc,
        final_epsilon,
        epsilon_order,
        delta: cfg.dp.delta,
        sampling_rate: q,
        noise_multiplier: if cfg.dp.enabled { sigma } else { 0.0 },
        sigma_calibrated,
        param_count: model.params.numel(),
        train_size: data.train.len(),
        val_size: data.val.len(),
        test_size: data.test.len(),
        normalization: data.normalization.clone(),
        caveats,
    };
    write_metrics_csv(&state.rows, &dir.join(METRICS_FILE))?;
    fs::write(dir.join(METADATA_FILE), serde_json::to_string_pretty(&metadata)?)?;
    Ok(RunRecord {
        rows: state.rows,
        metadata,
        config: config_text,
    })
}
