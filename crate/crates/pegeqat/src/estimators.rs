//! Backward rules at the rounding node: map the gradient w.r.t. the
//! quantized value x_q to a gradient w.r.t. the clipped value x_c.
//!
//! Inputs live in the clip-normalized [0, 1] domain, so the discretization
//! error x_c - x_q is scale-free across layers and clip families. Elements
//! saturated at a clip bound (x_c == 0 or x_c == 1) always get zero.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Straight-through: pass the gradient unchanged inside the clip range.
    Ste,
    /// Scale the gradient by the signed discretization error.
    Ewgs,
    /// Add the discretization error itself: g_c = g_q + mu * (x_c - x_q).
    Pege,
}

/// Per-step estimator parameters. `mu` is resolved from its schedule by the
/// training loop before each backward pass.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub mu: f64,
    pub delta: f64,
}

impl EstimatorConfig {
    pub fn ste() -> Self {
        EstimatorConfig { kind: EstimatorKind::Ste, mu: 0.0, delta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu < 0.0 {
            return Err(Error::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.delta < 0.0 {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

#[inline]
fn saturated<T: Scalar>(x_c: T) -> bool {
    x_c <= T::zero() || x_c >= T::one()
}

fn check_shapes<T: Scalar>(g_q: &[T], x_c: &[T], x_q: &[T]) -> Result<()> {
    if g_q.len() != x_c.len() || g_q.len() != x_q.len() {
        return Err(Error::dim(
            "estimator",
            format!("g_q {}, x_c {}, x_q {}", g_q.len(), x_c.len(), x_q.len()),
        ));
    }
    Ok(())
}

/// Straight-through estimator with clip gating.
pub fn ste_backward<T: Scalar>(g_q: &[T], x_c: &[T], x_q: &[T]) -> Result<Vec<T>> {
    check_shapes(g_q, x_c, x_q)?;
    Ok(g_q
        .iter()
        .zip(x_c)
        .map(|(&g, &c)| if saturated(c) { T::zero() } else { g })
        .collect())
}

/// Gradient scaling by signed discretization error:
/// g_c = g_q * (1 + delta * sign(g_q) * (x_c - x_q)), gated like STE.
pub fn ewgs_backward<T: Scalar>(g_q: &[T], x_c: &[T], x_q: &[T], delta: f64) -> Result<Vec<T>> {
    if delta == 0.0 {
        return ste_backward(g_q, x_c, x_q);
    }
    check_shapes(g_q, x_c, x_q)?;
    let d = T::from_f64(delta);
    Ok(g_q
        .iter()
        .zip(x_c.iter().zip(x_q))
        .map(|(&g, (&c, &q))| {
            if saturated(c) {
                T::zero()
            } else {
                g * (T::one() + d * g.signum() * (c - q))
            }
        })
        .collect())
}

/// Additive discretization-error correction:
/// g_c = g_q + mu * (x_c - x_q), gated like STE. The correction term does
/// not depend on g_q.
pub fn pege_backward<T: Scalar>(g_q: &[T], x_c: &[T], x_q: &[T], mu: f64) -> Result<Vec<T>> {
    pege_backward_masked(g_q, x_c, x_q, mu, None)
}

/// As [`pege_backward`], but the correction is only added where `active` is
/// true (progressive replacement leaves non-replaced elements untouched).
/// `active` of length 1 broadcasts; `None` means all elements are active.
pub fn pege_backward_masked<T: Scalar>(
    g_q: &[T],
    x_c: &[T],
    x_q: &[T],
    mu: f64,
    active: Option<&[bool]>,
) -> Result<Vec<T>> {
    if mu == 0.0 {
        return ste_backward(g_q, x_c, x_q);
    }
    check_shapes(g_q, x_c, x_q)?;
    let m = T::from_f64(mu);
    let is_active = |i: usize| match active {
        None => true,
        Some([single]) => *single,
        Some(mask) => mask[i],
    };
    Ok(g_q
        .iter()
        .zip(x_c.iter().zip(x_q))
        .enumerate()
        .map(|(i, (&g, (&c, &q)))| {
            if saturated(c) {
                T::zero()
            } else if is_active(i) {
                g + m * (c - q)
            } else {
                g
            }
        })
        .collect())
}

/// Dispatch on the configured estimator kind.
pub fn apply<T: Scalar>(
    cfg: &EstimatorConfig,
    g_q: &[T],
    x_c: &[T],
    x_q: &[T],
    active: Option<&[bool]>,
) -> Result<Vec<T>> {
    match cfg.kind {
        EstimatorKind::Ste => ste_backward(g_q, x_c, x_q),
        EstimatorKind::Ewgs => ewgs_backward(g_q, x_c, x_q, cfg.delta),
        EstimatorKind::Pege => pege_backward_masked(g_q, x_c, x_q, cfg.mu, active),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_tuple(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let g: Vec<f64> = (0..n).map(|i| rng::normal(seed, &[0, i as u64])).collect();
        // interior x_c so the gate never fires
        let c: Vec<f64> = (0..n)
            .map(|i| 0.01 + 0.98 * rng::uniform(seed, &[1, i as u64]))
            .collect();
        let q: Vec<f64> = (0..n).map(|i| rng::uniform(seed, &[2, i as u64])).collect();
        (g, c, q)
    }

    #[test]
    fn ste_passes_through_interior_elements() {
        let g = ste_backward(&[0.5, -0.2], &[0.3, 0.7], &[0.33, 0.66]).unwrap();
        assert_eq!(g, vec![0.5, -0.2]);
    }

    #[test]
    fn ste_zeroes_saturated_elements() {
        let g = ste_backward(&[0.5, -0.2, 1.0], &[1.0, 0.5, 0.0], &[1.0, 0.33, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, -0.2, 0.0]);
    }

    #[test]
    fn ste_zero_gradient_stays_zero() {
        let g = ste_backward(&[0.0, 0.0], &[0.3, 0.6], &[0.33, 0.66]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn ewgs_hand_values() {
        let g = ewgs_backward::<f64>(&[1.0], &[0.5], &[0.3], 0.5).unwrap();
        assert!((g[0] - 1.1).abs() < 1e-15); // 1 * (1 + 0.5 * 1 * 0.2)
        let g = ewgs_backward::<f64>(&[-1.0], &[0.5], &[0.3], 0.5).unwrap();
        assert!((g[0] + 0.9).abs() < 1e-15); // sign flips the correction
    }

    #[test]
    fn pege_hand_value() {
        let g = pege_backward::<f64>(&[0.5], &[0.7], &[1.0], 0.1).unwrap();
        assert!((g[0] - 0.47).abs() < 1e-15); // 0.5 + 0.1 * (-0.3)
    }

    #[test]
    fn pege_on_lattice_point_is_plain_gradient() {
        let g = pege_backward(&[0.5], &[1.0 / 3.0], &[1.0 / 3.0], 0.2).unwrap();
        assert_eq!(g, vec![0.5]);
    }

    #[test]
    fn degenerate_cases_are_bitwise_ste() {
        for seed in 0..20u64 {
            let (g, c, q) = random_tuple(seed, 64);
            let ste = ste_backward(&g, &c, &q).unwrap();
            let pege0 = pege_backward(&g, &c, &q, 0.0).unwrap();
            let ewgs0 = ewgs_backward(&g, &c, &q, 0.0).unwrap();
            for i in 0..g.len() {
                assert_eq!(ste[i].to_bits(), pege0[i].to_bits());
                assert_eq!(ste[i].to_bits(), ewgs0[i].to_bits());
            }
        }
    }

    #[test]
    fn pege_minus_ste_is_the_error_term() {
        for seed in 0..50u64 {
            let (g, c, q) = random_tuple(seed, 32);
            let mu = rng::uniform(seed, &[99]) * 0.5;
            let ste = ste_backward(&g, &c, &q).unwrap();
            let pege = pege_backward(&g, &c, &q, mu).unwrap();
            for i in 0..g.len() {
                let expect = mu * (c[i] - q[i]);
                assert!((pege[i] - ste[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pege_is_affine_in_mu() {
        for seed in 0..20u64 {
            let (g, c, q) = random_tuple(seed, 16);
            let (m1, m2) = (0.07, 0.21);
            let a = pege_backward(&g, &c, &q, m1).unwrap();
            let b = pege_backward(&g, &c, &q, m2).unwrap();
            let zero = pege_backward(&g, &c, &q, 0.0).unwrap();
            let both = pege_backward(&g, &c, &q, m1 + m2).unwrap();
            for i in 0..g.len() {
                assert!((a[i] + b[i] - zero[i] - both[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_estimators_gate_saturated_elements() {
        let c = [0.0, 1.0];
        let q = [0.0, 1.0];
        let g = [0.4, -0.4];
        assert_eq!(ste_backward(&g, &c, &q).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ewgs_backward(&g, &c, &q, 0.3).unwrap(), vec![0.0, 0.0]);
        assert_eq!(pege_backward(&g, &c, &q, 0.3).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn masked_correction_skips_inactive_elements() {
        let g = [0.5, 0.5];
        let c = [0.7, 0.7];
        let q = [1.0, 1.0];
        let out = pege_backward_masked::<f64>(&g, &c, &q, 0.1, Some(&[true, false])).unwrap();
        assert!((out[0] - 0.47).abs() < 1e-15);
        assert_eq!(out[1], 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(ste_backward(&[1.0], &[0.5, 0.6], &[0.5, 0.6]).is_err());
    }
}
