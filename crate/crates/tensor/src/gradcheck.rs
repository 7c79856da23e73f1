//! Central finite differences for checking backward rules.
//!
//! These helpers only evaluate forward passes, so they stay independent of
//! the tape's backward implementation.

/// Central-difference gradient of `f` at `point` with step `h`.
pub fn central_difference<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Elementwise relative error `|a-b| / max(|a|, |b|, floor)`, maximized.
///
/// `floor` keeps near-zero gradients from inflating the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
