//! Central-difference gradient checking.

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// `(f(+eps) − f(−eps)) / 2·eps` for a scalar perturbation function.
pub fn central_difference<F>(mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    Ok((f(eps)? - f(-eps)?) / (2.0 * eps))
}

/// Compares the analytic gradient of a scalar-valued `op` at `x` against
/// central differences over every coordinate. `op` returns the value and
/// its gradient with respect to its argument. Returns the maximum relative
/// error.
pub fn finite_diff_check<F>(mut op: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = op(x)?;
    if analytic.shape() != x.shape() {
        return shape_err(format!(
            "analytic gradient {:?} for input {:?}",
            analytic.shape(),
            x.shape()
        ));
    }
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_probe(|t| op(t).map(|(v, _)| v), x, analytic.data(), &coords, eps)
}

/// Central differences of `value` at `x` along each coordinate in `coords`.
pub fn numeric_gradient<F>(mut value: F, x: &Tensor, coords: &[usize], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return invalid(format!("finite-difference step must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.numel() {
            return shape_err(format!("probe coordinate {i} outside {} elements", x.numel()));
        }
        let orig = x.data()[i];
        out.push(central_difference(
            |d| {
                probe.data_mut()[i] = orig + d;
                value(&probe)
            },
            eps,
        )?);
        probe.data_mut()[i] = orig;
    }
    Ok(out)
}

/// Central-difference check restricted to `coords`, for expensive functions
/// where only a few coordinates are probed.
pub fn finite_diff_probe<F>(value: F, x: &Tensor, analytic: &[f64], coords: &[usize], eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.len() != x.numel() {
        return shape_err("analytic gradient length differs from input");
    }
    let numeric = numeric_gradient(value, x, coords, eps)?;
    Ok(coords.iter().zip(numeric).map(|(&i, n)| relative_error(analytic[i], n)).fold(0.0, f64::max))
}
