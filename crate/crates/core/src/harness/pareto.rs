//! Privacy/utility Pareto fronts over `(ε, accuracy)` points.

use crate::error::{Error, Result};

/// Points not dominated by any other, sorted by ε ascending. A point is
/// dominated when another has no larger ε and no smaller accuracy, with at
/// least one strict. Of several points sharing an ε only the most accurate
/// survives, and exact duplicates collapse to one.
pub fn pareto_front(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if let Some(p) = points.iter().find(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::Config(format!("non-finite point {p:?} in Pareto input")));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut front: Vec<(f64, f64)> = Vec::new();
    for p in sorted {
        // Sorted by ε then accuracy descending: `p` survives only if it beats
        // every point with smaller or equal ε.
        if front.last().is_none_or(|last| p.1 > last.1) {
            front.push(p);
        }
    }
    Ok(front)
}
