//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step RDP at integer order α is the binomial sum
//! `ln Σ_k C(α,k)(1−q)^(α−k) q^k exp((k²−k)/(2σ²)) / (α−1)`, evaluated in
//! log space. Steps compose additively and the total converts to (ε, δ) with
//! `ε = min_α rdp(α) + ln(1/δ)/(α−1)`.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-5;
pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 256;
/// Search interval and tolerance for [`calibrate_sigma`].
pub const SIGMA_RANGE: (f64, f64) = (0.3, 100.0);
pub const SIGMA_TOLERANCE: f64 = 1e-3;

/// Integer orders `2..=256`.
pub fn default_orders() -> Vec<u32> {
    (MIN_ORDER..=MAX_ORDER).collect()
}

/// Everything the accountant needs to price a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrivacyParams {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
}

/// Spent budget and the order that attains it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spent {
    pub epsilon: f64,
    pub order: u32,
}

impl PrivacyParams {
    pub fn spent(&self) -> Result<Spent> {
        epsilon(self.q, self.sigma, self.steps, self.delta)
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Privacy(format!("sampling rate {q} outside [0, 1]")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Privacy(format!("delta {delta} outside (0, 1)")));
    }
    Ok(())
}

/// Single-step RDP of the subsampled Gaussian mechanism at integer order `alpha`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    check_q(q)?;
    if alpha < 2 {
        return Err(Error::Privacy(format!("order {alpha} must be at least 2")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Privacy(format!(
            "noise multiplier {sigma} gives no privacy at q = {q}"
        )));
    }
    let a = alpha as f64;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let out = if q == 1.0 {
        a * inv_two_var
    } else {
        // The binomial weights sum to one, so S − 1 = Σ_{k≥2} w_k·(e^{c_k} − 1)
        // with only positive terms; working with S − 1 avoids cancellation
        // when the result is tiny.
        let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
        let mut log_binom = a.ln();
        let mut terms = Vec::with_capacity(alpha as usize - 1);
        for k in 2..=alpha {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
            let kf = k as f64;
            let c = (kf * kf - kf) * inv_two_var;
            terms.push(log_binom + (a - kf) * ln_1mq + kf * ln_q + ln_exp_m1(c));
        }
        let l = log_sum_exp(&terms);
        let ln_s = if l < 0.0 {
            l.exp().ln_1p()
        } else {
            l + (-l).exp().ln_1p()
        };
        ln_s / (a - 1.0)
    };
    if !out.is_finite() {
        return Err(Error::Privacy(format!(
            "RDP overflow at q = {q}, sigma = {sigma}, alpha = {alpha}"
        )));
    }
    Ok(out)
}

/// `ln(e^c − 1)` for `c > 0`.
fn ln_exp_m1(c: f64) -> f64 {
    if c < 30.0 {
        c.exp_m1().ln()
    } else {
        c + (-(-c).exp()).ln_1p()
    }
}

/// `ln Σ exp(t)`.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let (imax, &m) = terms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let rest: f64 = terms
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &t)| (t - m).exp())
        .sum();
    m + rest.ln_1p()
}

/// RDP of `steps` compositions at each order.
pub fn compose(per_step: &[f64], steps: u64) -> Vec<f64> {
    per_step.iter().map(|r| r * steps as f64).collect()
}

/// Per-order RDP of a full run.
pub fn compute_rdp(q: f64, sigma: f64, steps: u64, orders: &[u32]) -> Result<Vec<f64>> {
    check_q(q)?;
    if steps == 0 || q == 0.0 {
        return Ok(vec![0.0; orders.len()]);
    }
    let per_step = orders
        .iter()
        .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(compose(&per_step, steps))
}

/// Converts per-order RDP to (ε, δ)-DP; returns the best ε and its order.
/// Ties resolve to the smallest order.
pub fn rdp_to_dp(orders: &[u32], rdp: &[f64], delta: f64) -> Result<Spent> {
    check_delta(delta)?;
    if orders.is_empty() || orders.len() != rdp.len() {
        return Err(Error::Privacy(format!(
            "{} orders for {} RDP values",
            orders.len(),
            rdp.len()
        )));
    }
    let log_inv_delta = -delta.ln();
    let mut best: Option<Spent> = None;
    for (&a, &r) in orders.iter().zip(rdp) {
        if a < 2 {
            return Err(Error::Privacy(format!("order {a} must be at least 2")));
        }
        let eps = r + log_inv_delta / (a as f64 - 1.0);
        if best.is_none_or(|b| eps < b.epsilon) {
            best = Some(Spent {
                epsilon: eps,
                order: a,
            });
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Spent ε after `steps` noisy steps at sampling rate `q`. Zero steps or
/// `q = 0` cost nothing.
pub fn epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<Spent> {
    check_delta(delta)?;
    check_q(q)?;
    if steps == 0 || q == 0.0 {
        return Ok(Spent {
            epsilon: 0.0,
            order: MIN_ORDER,
        });
    }
    let orders = default_orders();
    let rdp = compute_rdp(q, sigma, steps, &orders)?;
    rdp_to_dp(&orders, &rdp, delta)
}

/// Smallest σ (to within [`SIGMA_TOLERANCE`]) in [`SIGMA_RANGE`] whose spent
/// ε does not exceed `target`.
pub fn calibrate_sigma(target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::Privacy(format!("target epsilon {target} must be positive")));
    }
    let eps = |s: f64| epsilon(q, s, steps, delta).map(|r| r.epsilon);
    let (mut lo, mut hi) = SIGMA_RANGE;
    if eps(hi)? > target {
        return Err(Error::Privacy(format!(
            "target epsilon {target} unreachable with sigma <= {hi}"
        )));
    }
    if eps(lo)? <= target {
        return Ok(lo);
    }
    while hi - lo > SIGMA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
