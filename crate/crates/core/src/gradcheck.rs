//! Central finite-difference gradient checking.
//!
//! Used by the test suites to verify every analytic backward pass. The
//! numeric side only ever evaluates forward passes, so it stays
//! independent of the gradient code it checks.

/// Central difference of `f` along coordinate `i` of `x`.
/// `x` is restored before returning.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, eps: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let fp = f(x);
    x[i] = orig - eps;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * eps)
}

/// Relative disagreement between an analytic and a numeric derivative,
/// with an absolute floor so that near-zero pairs compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Largest relative error between `analytic[i]` and the central
/// difference of `f` over the probed `indices`.
pub fn max_rel_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for &i in indices {
        let numeric = central_diff(f, x, i, eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Evenly spread probe indices (at most `count`) over a buffer of
/// length `len`.
pub fn probe_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|k| k * len / count).collect()
}
