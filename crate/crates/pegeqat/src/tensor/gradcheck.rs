//! Central-difference gradient oracle. Deliberately knows nothing about the
//! tape: it only re-evaluates a forward closure, so it stays an independent
//! check on every registered backward.

use crate::error::Result;
use crate::scalar::Scalar;

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h per element.
/// `f` must be deterministic and continuous at `x`; callers keep sample
/// points away from kinks (round steps, clip bounds, relu at 0).
pub fn finite_diff_grad<T: Scalar, F>(mut f: F, x: &[T], h: f64) -> Result<Vec<T>>
where
    F: FnMut(&[T]) -> Result<T>,
{
    let hs = T::from_f64(h);
    let mut xp = x.to_vec();
    let mut grad = vec![T::zero(); x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + hs;
        let fp = f(&xp)?;
        xp[i] = orig - hs;
        let fm = f(&xp)?;
        xp[i] = orig;
        grad[i] = (fp - fm) / (hs + hs);
    }
    Ok(grad)
}

/// Infinity-norm relative error between an analytic and a reference gradient.
pub fn rel_error<T: Scalar>(analytic: &[T], reference: &[T]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let mut max_diff = 0.0f64;
    let mut max_ref = 0.0f64;
    for (&a, &r) in analytic.iter().zip(reference) {
        max_diff = max_diff.max((a.as_f64() - r.as_f64()).abs());
        max_ref = max_ref.max(r.as_f64().abs());
    }
    max_diff / max_ref.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        // f = sum(x^2), grad = 2x
        let g = finite_diff_grad(
            |x: &[f64]| Ok(x.iter().map(|v| v * v).sum()),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_: &[f64]| Ok(3.5), &[0.3, -0.7, 9.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
