//! Finite-difference gradient verification.
//!
//! Central differences with a small step compared against tape gradients.
//! Used by the unit tests of every differentiable op and by the acceptance
//! suite.

/// Central finite-difference gradient of `f` at `x0`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute guard for near-zero gradients.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= 1e-7 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Maximum relative error between an analytic gradient and central
/// differences of `f` around `x0`.
pub fn max_rel_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let numeric = central_diff(f, x0, h);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
