//! Central finite differences for verifying analytic gradients.

use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params` with step `h`.
pub fn central_differences<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut point = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point)?;
        point[i] = orig - h;
        let down = f(&point)?;
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
            });
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |analytic_i − numeric_i| / (|numeric_i| + 1e−12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Compares `analytic` against central differences of `f` and returns the
/// largest relative error over all coordinates.
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{} gradients for {} parameters", analytic.len(), params.len()),
        ));
    }
    let numeric = central_differences(f, params, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one() {
        let err = finite_diff_check(|w| Ok(w[0] * w[0]), &[1.0], &[2.0], 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let coeffs = [3.0, -2.0, 0.5];
        let f = |w: &[f64]| Ok(w.iter().zip(&coeffs).map(|(a, b)| a * b).sum::<f64>() + 7.0);
        let err = finite_diff_check(f, &[0.3, 1.2, -4.0], &coeffs, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let r = finite_diff_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
