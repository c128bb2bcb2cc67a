//! Central finite-difference gradient checking.
//!
//! The checker treats the function under test as a black box over a flat
//! parameter vector, so it stays independent of the autodiff tape it is
//! used to validate.

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Worst relative disagreement between two gradient vectors.
///
/// Per element: |a - b| / max(|a|, |b|), with an absolute floor so that
/// a pair of near-zero entries does not register as an error.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if diff <= abs_floor {
            continue;
        }
        let denom = a.abs().max(n.abs()).max(abs_floor);
        worst = worst.max(diff / denom);
    }
    worst
}

/// Checks a scalar function's analytic gradient against central
/// differences. Returns the worst relative error.
pub fn check<F, G>(f: F, analytic: G, x: &[f64], step: f64, abs_floor: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
    G: FnOnce() -> Vec<f64>,
{
    let numeric = finite_diff(f, x, step);
    max_rel_error(&analytic(), &numeric, abs_floor)
}
