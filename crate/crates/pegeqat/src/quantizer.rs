//! Unified uniform quantizer: a clipping stage with a pluggable family
//! (learnable upper bound, learnable interval, or fixed unit range) followed
//! by a rounding stage onto 2^b levels (unsigned activation lattice or
//! symmetric signed weight lattice).
//!
//! All functions here are pure; graph wiring lives in [`crate::models`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipFamily {
    /// v = 0, trainable upper bound m: x_c = 0.5(|x| - |x - m| + m).
    Pact,
    /// Trainable interval (p1, p2) mapped affinely onto [0, 1].
    Interval,
    /// Fixed clamp to [0, 1]; no trainable parameters.
    FixedUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundFamily {
    /// x_q = round((2^b - 1) x_c) / (2^b - 1), in [0, 1].
    Activation,
    /// x_q = 2(round((2^b - 1) x_c) / (2^b - 1) - 0.5), in [-1, 1].
    Weight,
}

/// Static description of one quantizer. Trainable parameters (alpha) are
/// stored by the owner and passed into each call; `alpha_count` says how many.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizerSpec {
    pub bits: u8,
    pub clip: ClipFamily,
    pub round: RoundFamily,
    /// Full-precision passthrough: clip and round become the identity.
    pub bypass: bool,
}

impl QuantizerSpec {
    pub fn new(bits: u8, clip: ClipFamily, round: RoundFamily) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Config(format!("bit width {bits} not in [1, 8]")));
        }
        Ok(QuantizerSpec { bits, clip, round, bypass: false })
    }

    pub fn bypass() -> Self {
        QuantizerSpec { bits: 8, clip: ClipFamily::FixedUnit, round: RoundFamily::Activation, bypass: true }
    }

    /// Number of trainable clip parameters (K_c). The round stage in both
    /// families takes none (K_r = 0).
    pub fn alpha_count(&self) -> usize {
        if self.bypass {
            return 0;
        }
        match self.clip {
            ClipFamily::Pact => 1,
            ClipFamily::Interval => 2,
            ClipFamily::FixedUnit => 0,
        }
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    pub fn validate_alpha<T: Scalar>(&self, alpha: &[T]) -> Result<()> {
        if alpha.len() != self.alpha_count() {
            return Err(Error::Config(format!(
                "{:?} expects {} clip parameters, got {}",
                self.clip,
                self.alpha_count(),
                alpha.len()
            )));
        }
        match self.clip {
            ClipFamily::Pact if !self.bypass => {
                if alpha[0] <= T::zero() {
                    return Err(Error::Config(format!("pact bound m must be > 0, got {}", alpha[0])));
                }
            }
            ClipFamily::Interval if !self.bypass && alpha[1] == alpha[0] => {
                return Err(Error::DegenerateInterval(alpha[0].as_f64()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Initial clip parameters: PACT uses a fixed warm-start bound, INTERVAL
/// spans the observed min/max of a representative sample.
pub fn init_alpha<T: Scalar>(spec: &QuantizerSpec, sample: &[T], pact_init_m: f64) -> Result<Vec<T>> {
    match (spec.bypass, spec.clip) {
        (true, _) | (false, ClipFamily::FixedUnit) => Ok(Vec::new()),
        (false, ClipFamily::Pact) => Ok(vec![T::from_f64(pact_init_m)]),
        (false, ClipFamily::Interval) => {
            let mut lo = T::infinity();
            let mut hi = T::neg_infinity();
            for &v in sample {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if lo >= hi || !lo.is_finite() {
                return Err(Error::DegenerateInterval(lo.as_f64()));
            }
            Ok(vec![lo, hi])
        }
    }
}

/// Clipping stage. PACT output lives in [0, m]; the other families in [0, 1].
pub fn clip_forward<T: Scalar>(x: &[T], spec: &QuantizerSpec, alpha: &[T]) -> Result<Vec<T>> {
    if spec.bypass {
        return Ok(x.to_vec());
    }
    spec.validate_alpha(alpha)?;
    let half = T::from_f64(0.5);
    match spec.clip {
        ClipFamily::Pact => {
            let m = alpha[0];
            Ok(x.iter().map(|&v| half * (v.abs() - (v - m).abs() + m)).collect())
        }
        ClipFamily::Interval => {
            let (p1, p2) = (alpha[0], alpha[1]);
            let w = p2 - p1;
            Ok(x
                .iter()
                .map(|&v| ((v - p1) / w).max(T::zero()).min(T::one()))
                .collect())
        }
        ClipFamily::FixedUnit => Ok(x.iter().map(|&v| v.max(T::zero()).min(T::one())).collect()),
    }
}

/// Clipping stage normalized to [0, 1] for every family (PACT divides by m).
pub fn clip_norm<T: Scalar>(x: &[T], spec: &QuantizerSpec, alpha: &[T]) -> Result<Vec<T>> {
    let mut c = clip_forward(x, spec, alpha)?;
    if !spec.bypass {
        if let ClipFamily::Pact = spec.clip {
            let m = alpha[0];
            for v in c.iter_mut() {
                *v = *v / m;
            }
        }
    }
    Ok(c)
}

/// Round a normalized value onto the 2^b-level lattice in [0, 1].
/// Ties round half away from zero.
pub fn round_norm<T: Scalar>(x_cn: &[T], bits: u8) -> Vec<T> {
    let steps = T::from_f64(((1u32 << bits) - 1) as f64);
    x_cn.iter().map(|&v| (v * steps).round() / steps).collect()
}

/// Affine map from the normalized lattice to the output domain:
/// x_q = scale * q_n + offset.
pub fn denorm_affine<T: Scalar>(spec: &QuantizerSpec, alpha: &[T]) -> (T, T) {
    let m = match spec.clip {
        ClipFamily::Pact if !spec.bypass => alpha[0],
        _ => T::one(),
    };
    match spec.round {
        RoundFamily::Activation => (m, T::zero()),
        RoundFamily::Weight => (m + m, -m),
    }
}

/// Rounding stage on a clipped input (the output of [`clip_forward`]).
pub fn round_forward<T: Scalar>(x_c: &[T], spec: &QuantizerSpec, alpha: &[T]) -> Vec<T> {
    if spec.bypass {
        return x_c.to_vec();
    }
    let m = match spec.clip {
        ClipFamily::Pact => alpha[0],
        _ => T::one(),
    };
    let normalized: Vec<T> = x_c.iter().map(|&v| v / m).collect();
    let q = round_norm(&normalized, spec.bits);
    let (a, b) = denorm_affine(spec, alpha);
    q.iter().map(|&v| a * v + b).collect()
}

/// Full quantizer: returns (x_c, x_q). Both are kept because backward
/// estimators consume the discretization error x_c - x_q.
pub fn quantize<T: Scalar>(x: &[T], spec: &QuantizerSpec, alpha: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if spec.bypass {
        return Ok((x.to_vec(), x.to_vec()));
    }
    let x_c = clip_forward(x, spec, alpha)?;
    let x_q = round_forward(&x_c, spec, alpha);
    Ok((x_c, x_q))
}

/// d(clip_norm)/dx per element: the affine slope inside the active interval,
/// zero at and beyond the bounds.
pub fn clip_input_slope<T: Scalar>(x: &[T], spec: &QuantizerSpec, alpha: &[T]) -> Vec<T> {
    if spec.bypass {
        return vec![T::one(); x.len()];
    }
    match spec.clip {
        ClipFamily::Pact => {
            let m = alpha[0];
            let s = m.recip();
            x.iter()
                .map(|&v| if v > T::zero() && v < m { s } else { T::zero() })
                .collect()
        }
        ClipFamily::Interval => {
            let (p1, p2) = (alpha[0], alpha[1]);
            let s = (p2 - p1).recip();
            x.iter()
                .map(|&v| if v > p1 && v < p2 { s } else { T::zero() })
                .collect()
        }
        ClipFamily::FixedUnit => x
            .iter()
            .map(|&v| if v > T::zero() && v < T::one() { T::one() } else { T::zero() })
            .collect(),
    }
}

/// Gradients of the loss w.r.t. the clip parameters, treating the round
/// stage as the identity (straight-through). `upstream` is the gradient
/// arriving at the quantizer output, one value per element of `x`.
///
/// PACT: d/dm = 1 where x >= m, else 0, summed.
/// INTERVAL: exact derivative of the affine clamp, zero outside (p1, p2).
pub fn clip_param_grad<T: Scalar>(
    x: &[T],
    spec: &QuantizerSpec,
    alpha: &[T],
    upstream: &[T],
) -> Result<Vec<T>> {
    if x.len() != upstream.len() {
        return Err(Error::dim("clip_param_grad", "upstream length".to_string()));
    }
    if spec.bypass {
        return Ok(Vec::new());
    }
    spec.validate_alpha(alpha)?;
    match spec.clip {
        ClipFamily::Pact => {
            let m = alpha[0];
            let mut gm = T::zero();
            for (&v, &u) in x.iter().zip(upstream) {
                if v >= m {
                    gm = gm + u;
                }
            }
            Ok(vec![gm])
        }
        ClipFamily::Interval => {
            let (p1, p2) = (alpha[0], alpha[1]);
            let w2 = ((p2 - p1) * (p2 - p1)).recip();
            let mut g1 = T::zero();
            let mut g2 = T::zero();
            for (&v, &u) in x.iter().zip(upstream) {
                if v > p1 && v < p2 {
                    g1 = g1 + u * (v - p2) * w2;
                    g2 = g2 - u * (v - p1) * w2;
                }
            }
            Ok(vec![g1, g2])
        }
        ClipFamily::FixedUnit => Ok(Vec::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_grad;

    fn pact(bits: u8) -> QuantizerSpec {
        QuantizerSpec::new(bits, ClipFamily::Pact, RoundFamily::Activation).unwrap()
    }
    fn interval(bits: u8, round: RoundFamily) -> QuantizerSpec {
        QuantizerSpec::new(bits, ClipFamily::Interval, round).unwrap()
    }

    #[test]
    fn pact_clip_matches_closed_form() {
        let spec = pact(2);
        let m = [2.0f64];
        let c = clip_forward(&[1.0], &spec, &m).unwrap();
        assert_eq!(c, vec![1.0]); // interior passes through
        let c = clip_forward(&[-1.0, 3.0], &spec, &m).unwrap();
        assert_eq!(c, vec![0.0, 2.0]);
    }

    #[test]
    fn interval_clip_affine_clamp() {
        let spec = interval(2, RoundFamily::Activation);
        let a = [-1.0f64, 1.0];
        let c = clip_forward(&[0.0, -2.0, 2.0], &spec, &a).unwrap();
        assert_eq!(c, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn degenerate_interval_is_an_error() {
        let spec = interval(2, RoundFamily::Activation);
        assert!(matches!(
            clip_forward(&[0.0f64], &spec, &[0.5, 0.5]),
            Err(Error::DegenerateInterval(_))
        ));
    }

    #[test]
    fn activation_rounding_b2() {
        let q = round_norm(&[0.4f64], 2);
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-15); // round(1.2) = 1
        let q = round_norm(&[0.0f64, 1.0], 2);
        assert_eq!(q, vec![0.0, 1.0]);
    }

    #[test]
    fn weight_rounding_b2_half_away_from_zero() {
        let spec = interval(2, RoundFamily::Weight);
        let a = [0.0f64, 1.0];
        let q = round_forward(&[0.0, 1.0, 0.5], &spec, &a);
        assert_eq!(q[0], -1.0);
        assert_eq!(q[1], 1.0);
        assert!((q[2] - 1.0 / 3.0).abs() < 1e-15); // round(1.5) = 2 -> 2(2/3 - 0.5)
    }

    #[test]
    fn bypass_returns_input_twice() {
        let spec = QuantizerSpec::bypass();
        let (c, q) = quantize(&[0.3f64, -4.0, 7.5], &spec, &[]).unwrap();
        assert_eq!(c, vec![0.3, -4.0, 7.5]);
        assert_eq!(q, vec![0.3, -4.0, 7.5]);
    }

    #[test]
    fn pact_normalize_round_denormalize() {
        let spec = pact(2);
        let (c, q) = quantize(&[1.0f64], &spec, &[2.0]).unwrap();
        assert_eq!(c, vec![1.0]);
        assert!((q[0] - 2.0 * (2.0 / 3.0)).abs() < 1e-12); // 1.3333
    }

    #[test]
    fn one_bit_weight_quantizer() {
        let spec = interval(1, RoundFamily::Weight);
        let (_, q) = quantize(&[0.6f64], &spec, &[0.0, 1.0]).unwrap();
        assert_eq!(q, vec![1.0]); // round(0.6) = 1 -> 2(1 - 0.5)
    }

    #[test]
    fn pact_param_grad_rules() {
        let spec = pact(2);
        let g = clip_param_grad(&[0.5f64, 1.9], &spec, &[2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0]); // nothing clipped
        let g = clip_param_grad(&[3.0f64], &spec, &[2.0], &[1.0]).unwrap();
        assert_eq!(g, vec![1.0]); // clipped element passes upstream
    }

    #[test]
    fn interval_param_grad_matches_finite_differences() {
        let spec = interval(2, RoundFamily::Activation);
        let x = [0.5f64];
        let up = [1.0f64];
        let g = clip_param_grad(&x, &spec, &[0.0, 1.0], &up).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let fd = finite_diff_grad(
                |a: &[f64]| Ok(clip_forward(&x, &spec, a).unwrap()[0]),
                &[0.0, 1.0],
                1e-6,
            )
            .unwrap();
            assert!(
                (gi - fd[i]).abs() < 1e-4,
                "param {i}: analytic {gi} vs fd {}",
                fd[i]
            );
        }
    }

    #[test]
    fn clip_param_grad_fd_oracle_random_points() {
        // interval clip away from kinks, several random points per check
        let spec = interval(3, RoundFamily::Activation);
        let alpha = [-0.4f64, 1.3];
        for t in 0..10u64 {
            let x: Vec<f64> = (0..6)
                .map(|i| crate::rng::uniform(900 + t, &[i]) * 3.0 - 1.0)
                .filter(|v| (v - alpha[0]).abs() > 1e-3 && (v - alpha[1]).abs() > 1e-3)
                .collect();
            let up = vec![1.0; x.len()];
            let analytic = clip_param_grad(&x, &spec, &alpha, &up).unwrap();
            let fd = finite_diff_grad(
                |a: &[f64]| {
                    Ok(clip_forward(&x, &spec, a).unwrap().iter().sum::<f64>())
                },
                &alpha,
                1e-6,
            )
            .unwrap();
            for i in 0..2 {
                let denom = fd[i].abs().max(1e-8);
                assert!(
                    ((analytic[i] - fd[i]).abs() / denom) < 1e-4 || (analytic[i] - fd[i]).abs() < 1e-8,
                    "rel err too large: {} vs {}",
                    analytic[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn level_count_monotonicity_and_range() {
        for bits in 1..=4u8 {
            for (spec, alpha, lo, hi) in [
                (
                    QuantizerSpec::new(bits, ClipFamily::FixedUnit, RoundFamily::Activation).unwrap(),
                    vec![],
                    0.0,
                    1.0,
                ),
                (interval(bits, RoundFamily::Weight), vec![-0.4f64, 1.3], -1.0, 1.0),
                (pact(bits), vec![2.0], 0.0, 2.0),
            ] {
                let n = 10_001;
                let xs: Vec<f64> = (0..n).map(|i| -0.5 + 3.0 * i as f64 / (n - 1) as f64).collect();
                let (_, q) = quantize(&xs, &spec, &alpha).unwrap();
                let mut uniq: Vec<f64> = q.clone();
                uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
                uniq.dedup();
                assert_eq!(uniq.len(), 1usize << bits, "{spec:?}");
                assert_eq!(uniq[0], lo, "{spec:?}");
                assert_eq!(*uniq.last().unwrap(), hi, "{spec:?}");
                // monotone in the input
                for w in q.windows(2) {
                    assert!(w[0] <= w[1]);
                }
            }
        }
    }

    #[test]
    fn activation_lattice_is_idempotent() {
        let spec = QuantizerSpec::new(3, ClipFamily::FixedUnit, RoundFamily::Activation).unwrap();
        let xs: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let (_, q1) = quantize(&xs, &spec, &[]).unwrap();
        let (_, q2) = quantize(&q1, &spec, &[]).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn rejects_bad_bit_widths() {
        assert!(QuantizerSpec::new(0, ClipFamily::Pact, RoundFamily::Activation).is_err());
        assert!(QuantizerSpec::new(9, ClipFamily::Pact, RoundFamily::Activation).is_err());
    }
}
