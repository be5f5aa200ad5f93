use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Central finite-difference gradient of a scalar function, the
/// verification oracle for every analytic backward pass in this crate.
pub fn finite_diff_grad(
    mut loss_fn: impl FnMut(&Matrix) -> f64,
    p: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidArgument(
            "step size h must be positive".into(),
        ));
    }
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    let mut probe = p.clone();
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + h);
            let plus = loss_fn(&probe);
            probe.set(i, j, orig - h);
            let minus = loss_fn(&probe);
            probe.set(i, j, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite_diff_grad"));
            }
            grad.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Elementwise max relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert!(a.same_shape(b), "max_rel_err requires equal shapes");
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Tolerance every analytic gradient must meet against the oracle at `GRADCHECK_H`.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_H: f64 = 1e-3;
