/// Floor on the relative-error denominator. Central differences with
/// `epsilon = 1e-6` on an O(1) loss carry roundoff near 1e-10, so entries
/// below this scale are effectively compared with absolute tolerance
/// `1e-6 × tolerance`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Largest element-wise relative error between `analytic` and central
/// differences of `loss_fn` around `params`. Relative error uses the
/// denominator `max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameter length");
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let fp = loss_fn(&theta);
        theta[i] = orig - epsilon;
        let fm = loss_fn(&theta);
        theta[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        let rel = (a - numeric).abs() / denom;
        worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = [0.3, -1.2, 2.5, 0.0];
        let err = finite_difference_check(|t| 0.5 * t.iter().map(|x| x * x).sum::<f64>(), &theta, &theta, 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let err = finite_difference_check(|_| 3.0, &[1.0, 2.0], &[0.0, 0.0], 1e-6);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let err = finite_difference_check(|t| t[0] * t[0], &[1.0], &[1.0], 1e-6);
        assert!(err > 0.4);
    }

    #[test]
    fn tiny_entries_use_the_floor() {
        let err = finite_difference_check(|t| 1e-9 * t[0], &[0.0], &[2e-9], 1e-6);
        assert!((err - 1e-9 / RELATIVE_ERROR_FLOOR).abs() < 1e-6, "{err}");
    }
}
