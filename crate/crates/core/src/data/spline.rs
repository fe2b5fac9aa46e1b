//! Natural cubic spline basis with knots at sample quantiles.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default number of knots when a spline column does not specify one.
pub const DEFAULT_KNOTS: usize = 5;

/// Linear-interpolation sample quantile of already-sorted data.
pub(crate) fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = prob.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Knots at equally spaced sample quantiles `0, 1/(K-1), ..., 1`.
pub fn quantile_knots(x: &[f64], knot_count: usize) -> Result<Vec<f64>> {
    if knot_count < 3 {
        return Err(Error::InvalidArgument(format!("knot_count must be at least 3, got {knot_count}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spline input".into()));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < knot_count {
        return Err(Error::DegenerateKnots(format!(
            "{} distinct values for {knot_count} knots",
            distinct.len()
        )));
    }
    let knots: Vec<f64> = (0..knot_count)
        .map(|k| sorted_quantile(&sorted, k as f64 / (knot_count - 1) as f64))
        .collect();
    if knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::DegenerateKnots(format!("quantile knots are not strictly increasing: {knots:?}")));
    }
    Ok(knots)
}

fn cube_plus(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

/// Evaluates the `K - 1` column natural cubic spline basis at `x` for fixed
/// knots: the identity column followed by `d_k - d_{K-1}` for
/// `k = 1..K-2`, where `d_k(x) = ((x - t_k)^3_+ - (x - t_K)^3_+) / (t_K - t_k)`.
/// The constant function is left to the model's intercept.
pub fn natural_cubic_basis_at(x: &[f64], knots: &[f64]) -> DMatrix<f64> {
    let k = knots.len();
    let last = knots[k - 1];
    let d = |v: f64, j: usize| (cube_plus(v - knots[j]) - cube_plus(v - last)) / (last - knots[j]);
    DMatrix::from_fn(x.len(), k - 1, |i, c| {
        let v = x[i];
        if c == 0 {
            v
        } else {
            d(v, c - 1) - d(v, k - 2)
        }
    })
}

/// `n × (knot_count - 1)` natural cubic spline basis with quantile knots.
pub fn natural_cubic_basis(x: &[f64], knot_count: usize) -> Result<DMatrix<f64>> {
    let knots = quantile_knots(x, knot_count)?;
    Ok(natural_cubic_basis_at(x, &knots))
}
