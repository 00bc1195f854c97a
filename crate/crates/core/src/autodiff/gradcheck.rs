//! Central finite differences, used to validate reverse-mode gradients.
//!
//! These routines only ever call the forward function, so they stay
//! independent of the tape's gradient rules.

use super::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative.
///
/// The denominator is floored at `floor` so coordinates whose true gradient
/// is essentially zero are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of `f` with respect to every coordinate of
/// `inputs[which]`.
pub fn numeric_gradient(
    inputs: &[Tensor],
    which: usize,
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<f64> {
    let mut work = inputs.to_vec();
    let n = work[which].numel();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let fp = f(&work);
        work[which].data_mut()[i] = orig - h;
        let fm = f(&work);
        work[which].data_mut()[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Worst relative error over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
