//! DP-SGD: per-sample gradients, flat L2 clipping, Gaussian noising and the
//! momentum / decoupled weight-decay update.
//!
//! Noise is normalized by the expected lot size `L`, never by the realized
//! Poisson lot size, so the sensitivity of one step stays `C / L`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::autograd::{Reduction, Tape};
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub expected_lot_size: usize,
    pub sampling_rate: f64,
    pub delta: f64,
    pub seed: u64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::Config(format!(
                "noise multiplier {} must be finite and non-negative",
                self.noise_multiplier
            )));
        }
        if self.expected_lot_size == 0 {
            return Err(Error::Config("expected lot size must be positive".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sampling rate {} outside (0, 1]",
                self.sampling_rate
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1)", self.delta)));
        }
        Ok(())
    }
}

/// How per-sample gradients are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerSampleMethod {
    /// One forward/backward pass per sample. The reference path.
    Microbatch,
    /// One batched pass whose parameter gradients keep the sample axis.
    #[default]
    Batched,
}

/// `rows × dim` gradient matrix, one row per sample, columns in
/// [`ParamSet::flatten`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGrads<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
    /// Mean cross-entropy over the samples.
    pub loss: f64,
}

impl<T: Scalar> PerSampleGrads<T> {
    /// An empty lot over `dim` parameters.
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: 0,
            dim,
            data: Vec::new(),
            loss: 0.0,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn check_batch<T: Scalar>(images: &Tensor<T>, targets: &[usize]) -> Result<usize> {
    let n = images.shape().first().copied().unwrap_or(0);
    if targets.is_empty() {
        return Err(Error::shape("per_sample_gradients", "empty batch"));
    }
    if n != targets.len() {
        return Err(Error::shape(
            "per_sample_gradients",
            format!("{n} images for {} targets", targets.len()),
        ));
    }
    Ok(n)
}

/// Gradient of each sample's own cross-entropy loss.
pub fn per_sample_gradients<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    targets: &[usize],
    method: PerSampleMethod,
) -> Result<PerSampleGrads<T>> {
    let n = check_batch(images, targets)?;
    let dim = model.params.numel();
    match method {
        PerSampleMethod::Microbatch => {
            let mut data = Vec::with_capacity(n * dim);
            let mut loss_sum = 0.0;
            for i in 0..n {
                let (loss, grad) =
                    batch_gradient(model, &images.slice_batch(i, i + 1)?, &targets[i..=i])?;
                loss_sum += loss;
                data.extend(grad);
            }
            Ok(PerSampleGrads {
                rows: n,
                dim,
                data,
                loss: loss_sum / n as f64,
            })
        }
        PerSampleMethod::Batched => {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let x = tape.input(images.clone())?;
            let logits = model.forward(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy(logits, targets, Reduction::Sum)?;
            let total = tape.value(loss)?.data()[0].as_f64();
            let grads = tape.backward_per_sample(loss)?;
            let data = model.params.flatten_per_sample_grads(&grads, &bound, n)?;
            Ok(PerSampleGrads {
                rows: n,
                dim,
                data,
                loss: total / n as f64,
            })
        }
    }
}

/// Mean cross-entropy over the batch and its gradient, flattened.
pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    targets: &[usize],
) -> Result<(f64, Vec<T>)> {
    check_batch(images, targets)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let x = tape.input(images.clone())?;
    let logits = model.forward(&mut tape, &bound, x)?;
    let loss = tape.cross_entropy(logits, targets, Reduction::Mean)?;
    let value = tape.value(loss)?.data()[0].as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, model.params.flatten_grads(&grads, &bound)))
}

fn l2_norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Scales every row to L2 norm at most `clip` and returns the pre-clip norms.
/// Rows already within the bound are left bitwise unchanged; clipped rows
/// satisfy the bound after rounding to `T`.
pub fn clip_per_sample<T: Scalar>(grads: &mut PerSampleGrads<T>, clip: f64) -> Result<Vec<f64>> {
    if !(clip > 0.0) {
        return Err(Error::Config(format!("clip norm {clip} must be positive")));
    }
    let mut norms = Vec::with_capacity(grads.rows);
    for i in 0..grads.rows {
        let row = grads.row_mut(i);
        let norm = l2_norm(row);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "clip_per_sample" });
        }
        norms.push(norm);
        if norm <= clip {
            continue;
        }
        let original = row.to_vec();
        let mut factor = clip / norm;
        loop {
            for (dst, src) in row.iter_mut().zip(&original) {
                *dst = T::from_f64(src.as_f64() * factor);
            }
            if l2_norm(row) <= clip {
                break;
            }
            factor *= 1.0 - 2.0 * T::epsilon().as_f64();
        }
    }
    Ok(norms)
}

/// `(Σ_i g_i + ξ) / L` with `ξ ~ N(0, σ²C²·I)`. Rows are summed in index
/// order in f64.
pub fn noisy_aggregate<T: Scalar>(
    clipped: &PerSampleGrads<T>,
    clip: f64,
    sigma: f64,
    lot_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>> {
    if !(sigma >= 0.0) || lot_size == 0 {
        return Err(Error::Config(format!(
            "noisy_aggregate needs sigma >= 0 and a positive lot size, got {sigma} and {lot_size}"
        )));
    }
    let mut sum = vec![0.0f64; clipped.dim];
    for i in 0..clipped.rows {
        for (s, g) in sum.iter_mut().zip(clipped.row(i)) {
            *s += g.as_f64();
        }
    }
    let std = sigma * clip;
    let l = lot_size as f64;
    Ok(sum
        .into_iter()
        .map(|s| {
            let noise = if std > 0.0 {
                std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            T::from_f64((s + noise) / l)
        })
        .collect())
}

/// Momentum buffer and hyperparameters of the parameter update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    /// Flat velocity in [`ParamSet::flatten`] order.
    pub velocity: Vec<T>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64, lr: f64) -> Self {
        Self {
            velocity: vec![T::ZERO; params.numel()],
            momentum,
            weight_decay,
            lr,
        }
    }
}

/// `v ← μv + g; w ← w − lr·v; w ← w − lr·wd·w`. Parameters are left untouched
/// if any updated value would be non-finite.
pub fn dp_sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grad: &[T],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let dim = params.numel();
    if grad.len() != dim || state.velocity.len() != dim {
        return Err(Error::shape(
            "dp_sgd_step",
            format!(
                "gradient {} / velocity {} for {dim} parameters",
                grad.len(),
                state.velocity.len()
            ),
        ));
    }
    let (mu, lr, wd) = (
        T::from_f64(state.momentum),
        T::from_f64(state.lr),
        T::from_f64(state.weight_decay),
    );
    let weights = params.flatten();
    let mut velocity = Vec::with_capacity(dim);
    let mut updated = Vec::with_capacity(dim);
    for ((&w, &v), &g) in weights.iter().zip(&state.velocity).zip(grad) {
        let v = mu * v + g;
        let w = w - lr * v;
        let w = w - lr * wd * w;
        if !(v.is_finite() && w.is_finite()) {
            return Err(Error::NonFinite { op: "dp_sgd_step" });
        }
        velocity.push(v);
        updated.push(w);
    }
    params.assign_flat(&updated)?;
    state.velocity = velocity;
    Ok(())
}

/// Diagnostics from one private step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lot_size: usize,
    /// Fraction of samples whose gradient was scaled down.
    pub clipped_fraction: f64,
}

/// One DP-SGD step on `lot`: per-sample gradients, clipping, noising and
/// the parameter update. An empty lot still takes a pure-noise step.
pub fn private_step<T: Scalar>(
    model: &mut Model<T>,
    lot: Option<(&Tensor<T>, &[usize])>,
    cfg: &DpConfig,
    method: PerSampleMethod,
    state: &mut OptimizerState<T>,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let mut grads = match lot {
        Some((images, targets)) => per_sample_gradients(model, images, targets, method)?,
        None => PerSampleGrads::empty(model.params.numel()),
    };
    let norms = clip_per_sample(&mut grads, cfg.clip_norm)?;
    let noisy = noisy_aggregate(
        &grads,
        cfg.clip_norm,
        cfg.noise_multiplier,
        cfg.expected_lot_size,
        rng,
    )?;
    dp_sgd_step(&mut model.params, &noisy, state)?;
    let clipped = norms.iter().filter(|&&n| n > cfg.clip_norm).count();
    Ok(StepStats {
        loss: grads.loss,
        lot_size: grads.rows,
        clipped_fraction: if grads.rows == 0 {
            0.0
        } else {
            clipped as f64 / grads.rows as f64
        },
    })
}

/// One ordinary momentum-SGD step on the mean loss of the batch.
pub fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    targets: &[usize],
    state: &mut OptimizerState<T>,
) -> Result<f64> {
    let (loss, grad) = batch_gradient(model, images, targets)?;
    dp_sgd_step(&mut model.params, &grad, state)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// `lr₀·γ^epoch`.
    Exponential { initial: f64, gamma: f64 },
    /// `lr₀·γ^⌊epoch/every⌋`.
    Step { initial: f64, gamma: f64, every: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let (initial, gamma) = match *self {
            LrSchedule::Exponential { initial, gamma } => (initial, gamma),
            LrSchedule::Step {
                initial,
                gamma,
                every,
            } => {
                if every == 0 {
                    return Err(Error::Config("lr step interval must be positive".into()));
                }
                (initial, gamma)
            }
        };
        if !(initial > 0.0 && initial.is_finite()) {
            return Err(Error::Config(format!("initial lr {initial} must be positive")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("lr decay {gamma} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (initial, gamma, k) = match *self {
            LrSchedule::Exponential { initial, gamma } => (initial, gamma, epoch),
            LrSchedule::Step {
                initial,
                gamma,
                every,
            } => (initial, gamma, epoch / every),
        };
        initial * gamma.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn grads(rows: &[&[f64]]) -> PerSampleGrads<f64> {
        PerSampleGrads {
            rows: rows.len(),
            dim: rows[0].len(),
            data: rows.concat(),
            loss: 0.0,
        }
    }

    #[test]
    fn clipping_examples() {
        let mut g = grads(&[&[6.0, 8.0], &[0.3, 0.4], &[0.0, 0.0]]);
        let norms = clip_per_sample(&mut g, 1.0).unwrap();
        assert_eq!(norms, [10.0, 0.5, 0.0]);
        assert!((g.row(0)[0] - 0.6).abs() < 1e-15 && (g.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(g.row(1), &[0.3, 0.4]);
        assert_eq!(g.row(2), &[0.0, 0.0]);
        assert!(clip_per_sample(&mut g, 0.0).is_err());
    }

    #[test]
    fn zero_noise_aggregate_is_mean_by_lot() {
        let g = grads(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = noisy_aggregate(&g, 1.0, 0.0, 4, &mut rng).unwrap();
        assert_eq!(out, [1.0, 1.5]);
        let empty = PerSampleGrads::<f64>::empty(3);
        assert_eq!(noisy_aggregate(&empty, 1.0, 0.0, 4, &mut rng).unwrap(), [0.0; 3]);
    }

    #[test]
    fn plain_sgd_when_momentum_and_decay_are_off() {
        let mut params = ParamSet::<f64>::new();
        params
            .push(crate::layers::Parameter {
                name: "w".into(),
                tensor: Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap(),
                fan_in: 1,
                fan_out: 1,
                role: crate::layers::ParamRole::Weight,
            })
            .unwrap();
        let mut state = OptimizerState::new(&params, 0.0, 0.0, 0.5);
        dp_sgd_step(&mut params, &[2.0, 2.0], &mut state).unwrap();
        assert_eq!(params.flatten(), [0.0, -3.0]);
        assert!(dp_sgd_step(&mut params, &[1.0], &mut state).is_err());
        assert!(dp_sgd_step(&mut params, &[f64::INFINITY, 0.0], &mut state).is_err());
        assert_eq!(params.flatten(), [0.0, -3.0]);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::Exponential {
            initial: 0.1,
            gamma: 1.5
        }
        .validate()
        .is_err());
        assert!(LrSchedule::Step {
            initial: 0.1,
            gamma: 0.9,
            every: 0
        }
        .validate()
        .is_err());
        assert!(LrSchedule::Exponential {
            initial: 0.0,
            gamma: 0.9
        }
        .validate()
        .is_err());
    }
}
