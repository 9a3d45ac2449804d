/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_difference_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + eps;
            let plus = f(&work);
            work[i] = orig - eps;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, using
/// `|a - b| / max(|a|, |b|, floor)` so near-zero entries compare absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
