//! Central finite differences for checking analytic gradients.

/// Step used throughout the gradient checks.
pub const STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`], so coordinates whose true
/// derivative is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate-wise [`relative_error`] and its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let x = [0.3, -1.2, 2.0];
        let num = central_difference(|v| v.iter().map(|t| t * t * t).sum(), &x, STEP);
        let ana: Vec<f64> = x.iter().map(|t| 3.0 * t * t).collect();
        assert!(max_relative_error(&ana, &num).0 < 1e-9);
    }
}
