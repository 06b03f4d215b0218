//! Time-varying training scalars: the replacement-rate schedulers, the mu
//! scheduler for the gradient correction, the cosine learning-rate schedule,
//! and the Bernoulli machinery that progressively swaps full-precision
//! values for quantized ones.

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

// ---- replacement rate ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateFamily {
    Constant,
    Linear,
    Logarithmic,
    Exponential,
    Cosine,
    /// No scheduler: the rate is 1 at every step (always fully quantized).
    None,
}

/// Replacement-rate schedule. Non-constant families are parameterized by
/// (p0, t_full): the initial rate and the step where the rate reaches 1.
/// The logarithmic family evaluates min(log_B(k*t + b_off), 1) with
/// b_off = B^p0 and k = (B - b_off) / t_full.
#[derive(Debug, Clone, Copy)]
pub struct RateSchedule {
    pub family: RateFamily,
    pub p0: f64,
    pub t_full: f64,
    pub base: f64,
    pub p_const: f64,
}

impl RateSchedule {
    pub fn new(family: RateFamily, p0: f64, t_full: f64, base: f64, p_const: f64) -> Result<Self> {
        let s = RateSchedule { family, p0, t_full, base, p_const };
        s.validate()?;
        Ok(s)
    }

    pub fn none() -> Self {
        RateSchedule { family: RateFamily::None, p0: 1.0, t_full: 1.0, base: 10.0, p_const: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            RateFamily::Constant => {
                if !(0.0..=1.0).contains(&self.p_const) {
                    return Err(Error::Config(format!("constant rate {} not in [0,1]", self.p_const)));
                }
            }
            RateFamily::None => {}
            _ => {
                if !(self.p0 > 0.0 && self.p0 <= 1.0) {
                    return Err(Error::Config(format!("p0 {} not in (0,1]", self.p0)));
                }
                if !self.t_full.is_finite() || self.t_full <= 0.0 {
                    return Err(Error::Config(format!("t_full {} must be > 0", self.t_full)));
                }
                if self.family == RateFamily::Logarithmic && (!self.base.is_finite() || self.base <= 1.0) {
                    return Err(Error::Config(format!("log base {} must be > 1", self.base)));
                }
            }
        }
        Ok(())
    }

    /// Offset b_off of the logarithmic form (the basic rate is log_B(b_off)).
    pub fn log_offset(&self) -> f64 {
        self.base.powf(self.p0)
    }

    /// Coefficient k of the logarithmic form.
    pub fn log_coeff(&self) -> f64 {
        (self.base - self.log_offset()) / self.t_full
    }

    /// Replacement rate at step `t`, clamped to [0, 1]. Monotone
    /// non-decreasing in `t` for every non-constant family.
    pub fn rate_at(&self, t: u64) -> f64 {
        let p = match self.family {
            RateFamily::None => 1.0,
            RateFamily::Constant => self.p_const,
            RateFamily::Linear => {
                let s = (t as f64 / self.t_full).min(1.0);
                self.p0 + (1.0 - self.p0) * s
            }
            RateFamily::Logarithmic => {
                // lerp form of k*t + b_off; hits the base exactly at t_full
                let s = t as f64 / self.t_full;
                let arg = self.log_offset() * (1.0 - s) + self.base * s;
                (arg.ln() / self.base.ln()).min(1.0)
            }
            RateFamily::Exponential => {
                let s = (t as f64 / self.t_full).min(1.0);
                self.p0.powf(1.0 - s)
            }
            RateFamily::Cosine => {
                let s = (t as f64 / self.t_full).min(1.0);
                self.p0 + (1.0 - self.p0) * 0.5 * (1.0 - (std::f64::consts::PI * s).cos())
            }
        };
        p.clamp(0.0, 1.0)
    }
}

// ---- mu schedule ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuFamily {
    Constant,
    Linear,
    Logarithmic,
    Exponential,
}

/// Schedule for the gradient-correction factor mu.
/// Exponential: mu_t = mu_max * (1 - e^(-k t)).
#[derive(Debug, Clone, Copy)]
pub struct MuSchedule {
    pub family: MuFamily,
    pub mu_max: f64,
    pub k: f64,
    pub t_full: f64,
    pub base: f64,
}

impl MuSchedule {
    pub fn new(family: MuFamily, mu_max: f64, k: f64, t_full: f64, base: f64) -> Result<Self> {
        if mu_max < 0.0 {
            return Err(Error::Config(format!("mu_max {mu_max} must be >= 0")));
        }
        if family == MuFamily::Exponential && (!k.is_finite() || k <= 0.0) {
            return Err(Error::Config(format!("mu coefficient {k} must be > 0")));
        }
        Ok(MuSchedule { family, mu_max, k, t_full, base })
    }

    /// Exponential schedule reaching 0.99 * mu_max at 80% of `total_steps`.
    pub fn exponential_for_run(mu_max: f64, total_steps: u64) -> Self {
        let k = (100.0f64).ln() / (0.8 * total_steps.max(1) as f64);
        MuSchedule { family: MuFamily::Exponential, mu_max, k, t_full: total_steps as f64, base: 10.0 }
    }

    pub fn constant(mu: f64) -> Self {
        MuSchedule { family: MuFamily::Constant, mu_max: mu, k: 1.0, t_full: 1.0, base: 10.0 }
    }

    /// mu at step `t`: monotone non-decreasing, bounded by mu_max.
    pub fn mu_at(&self, t: u64) -> f64 {
        match self.family {
            MuFamily::Constant => self.mu_max,
            MuFamily::Exponential => self.mu_max * (1.0 - (-self.k * t as f64).exp()),
            MuFamily::Linear => self.mu_max * (t as f64 / self.t_full).min(1.0),
            MuFamily::Logarithmic => {
                let s = t as f64 / self.t_full;
                let arg = 1.0 * (1.0 - s) + self.base * s;
                self.mu_max * (arg.ln() / self.base.ln()).clamp(0.0, 1.0)
            }
        }
    }
}

// ---- learning rate ----

/// Cosine annealing from eta0 at t = 0 to exactly 0 at t = t_max.
pub fn lr_at(eta0: f64, t: u64, t_max: u64) -> Result<f64> {
    if t > t_max {
        return Err(Error::Contract(format!("lr_at: step {t} beyond horizon {t_max}")));
    }
    if t_max == 0 {
        return Ok(eta0);
    }
    Ok(eta0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / t_max as f64).cos()))
}

// ---- replacement sampling ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One Bernoulli bit per step for the whole model.
    Global,
    /// One bit per quantized layer.
    PerLayer,
    /// One bit per weight element.
    PerElement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplacementMask {
    Global(bool),
    PerLayer(Vec<bool>),
    PerElement(Vec<Vec<bool>>),
}

impl ReplacementMask {
    /// Mask bits for one layer, as a broadcastable vector (length 1 or the
    /// layer's element count).
    pub fn layer_mask(&self, layer: usize) -> Vec<bool> {
        match self {
            ReplacementMask::Global(b) => vec![*b],
            ReplacementMask::PerLayer(v) => vec![v[layer]],
            ReplacementMask::PerElement(v) => v[layer].clone(),
        }
    }

    pub fn fraction_on(&self) -> f64 {
        let (on, total) = match self {
            ReplacementMask::Global(b) => (*b as usize, 1),
            ReplacementMask::PerLayer(v) => (v.iter().filter(|&&b| b).count(), v.len()),
            ReplacementMask::PerElement(v) => (
                v.iter().map(|l| l.iter().filter(|&&b| b).count()).sum(),
                v.iter().map(Vec::len).sum(),
            ),
        };
        on as f64 / total.max(1) as f64
    }
}

/// Draws replacement masks from counter-based streams: the same
/// (seed, step, granularity) always yields the same mask regardless of how
/// many draws happened before.
#[derive(Debug, Clone)]
pub struct ReplacementState {
    pub seed: u64,
    pub step: u64,
    pub granularity: Granularity,
    pub last_mask: Option<ReplacementMask>,
}

// stream tag so replacement draws never collide with other keyed streams
const REPLACE_STREAM: u64 = 0x5245_504c;

impl ReplacementState {
    pub fn new(seed: u64, granularity: Granularity) -> Self {
        ReplacementState { seed, step: 0, granularity, last_mask: None }
    }

    /// Sample the mask for step `t` at rate `p`. `layer_sizes` gives the
    /// element count of each quantized layer (used by PerElement).
    pub fn sample(&mut self, t: u64, p: f64, layer_sizes: &[usize]) -> Result<ReplacementMask> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("replacement rate {p} not in [0,1]")));
        }
        let mask = match self.granularity {
            Granularity::Global => {
                ReplacementMask::Global(rng::bernoulli(p, self.seed, &[REPLACE_STREAM, t]))
            }
            Granularity::PerLayer => ReplacementMask::PerLayer(
                (0..layer_sizes.len())
                    .map(|l| rng::bernoulli(p, self.seed, &[REPLACE_STREAM, t, l as u64]))
                    .collect(),
            ),
            Granularity::PerElement => ReplacementMask::PerElement(
                layer_sizes
                    .iter()
                    .enumerate()
                    .map(|(l, &n)| {
                        (0..n)
                            .map(|e| {
                                rng::bernoulli(p, self.seed, &[REPLACE_STREAM, t, l as u64, e as u64])
                            })
                            .collect()
                    })
                    .collect(),
            ),
        };
        self.step = t;
        self.last_mask = Some(mask.clone());
        Ok(mask)
    }
}

/// Select quantized values where the mask is on, full-precision elsewhere.
/// `mask` of length 1 broadcasts over the tensor.
pub fn mix_precision<T: Scalar>(w_f: &[T], w_q: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if w_f.len() != w_q.len() {
        return Err(Error::dim("mix_precision", format!("{} vs {}", w_f.len(), w_q.len())));
    }
    match mask {
        [single] => Ok(if *single { w_q.to_vec() } else { w_f.to_vec() }),
        m if m.len() == w_f.len() => Ok(w_f
            .iter()
            .zip(w_q)
            .zip(m)
            .map(|((&f, &q), &on)| if on { q } else { f })
            .collect()),
        m => Err(Error::dim(
            "mix_precision",
            format!("mask length {} incompatible with {} elements", m.len(), w_f.len()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_schedule() -> RateSchedule {
        RateSchedule::new(RateFamily::Logarithmic, 0.3, 1000.0, 10.0, 0.0).unwrap()
    }

    #[test]
    fn log_schedule_derived_constants() {
        let s = log_schedule();
        assert!((s.log_offset() - 10f64.powf(0.3)).abs() < 1e-12);
        assert!((s.log_coeff() - (10.0 - 10f64.powf(0.3)) / 1000.0).abs() < 1e-12);
        assert!((s.rate_at(0) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn log_schedule_clamps_exactly_at_t_full() {
        let s = log_schedule();
        assert_eq!(s.rate_at(1000), 1.0);
        assert_eq!(s.rate_at(5000), 1.0);
    }

    #[test]
    fn constant_schedule() {
        let s = RateSchedule::new(RateFamily::Constant, 0.3, 1.0, 10.0, 0.8).unwrap();
        for t in [0u64, 1, 100, 100_000] {
            assert_eq!(s.rate_at(t), 0.8);
        }
    }

    #[test]
    fn rates_bounded_and_monotone() {
        for family in [
            RateFamily::Linear,
            RateFamily::Logarithmic,
            RateFamily::Exponential,
            RateFamily::Cosine,
            RateFamily::None,
        ] {
            let s = RateSchedule::new(family, 0.3, 1000.0, 10.0, 0.0).unwrap();
            let mut prev = -1.0;
            for t in 0..=10_000u64 {
                let p = s.rate_at(t);
                assert!((0.0..=1.0).contains(&p), "{family:?} at {t}: {p}");
                assert!(p >= prev - 1e-12, "{family:?} decreased at {t}");
                prev = p;
            }
        }
    }

    #[test]
    fn log_dominates_linear_dominates_exponential() {
        let log = RateSchedule::new(RateFamily::Logarithmic, 0.3, 1000.0, 10.0, 0.0).unwrap();
        let lin = RateSchedule::new(RateFamily::Linear, 0.3, 1000.0, 10.0, 0.0).unwrap();
        let exp = RateSchedule::new(RateFamily::Exponential, 0.3, 1000.0, 10.0, 0.0).unwrap();
        for t in 1..1000u64 {
            let (a, b, c) = (log.rate_at(t), lin.rate_at(t), exp.rate_at(t));
            assert!(a >= b - 1e-12, "log {a} < linear {b} at {t}");
            assert!(b >= c - 1e-12, "linear {b} < exponential {c} at {t}");
        }
    }

    #[test]
    fn mu_exponential_values() {
        let s = MuSchedule::new(MuFamily::Exponential, 0.2, 0.001, 1.0, 10.0).unwrap();
        assert_eq!(s.mu_at(0), 0.0);
        assert!((s.mu_at(1000) - 0.2 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((s.mu_at(1000) - 0.126424).abs() < 1e-6);
        // within 1% of the max once k*t >= 5
        assert!(s.mu_at(5000) >= 0.99 * 0.2);
    }

    #[test]
    fn mu_families_bounded_and_monotone() {
        for family in [MuFamily::Constant, MuFamily::Linear, MuFamily::Logarithmic, MuFamily::Exponential] {
            let s = MuSchedule::new(family, 0.1, 0.002, 800.0, 10.0).unwrap();
            let mut prev = -1.0;
            for t in 0..=8000u64 {
                let m = s.mu_at(t);
                assert!((0.0..=0.1 + 1e-15).contains(&m), "{family:?} at {t}: {m}");
                assert!(m >= prev - 1e-15);
                prev = m;
            }
        }
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(lr_at(0.1, 0, 100).unwrap(), 0.1);
        assert_eq!(lr_at(0.1, 100, 100).unwrap(), 0.0);
        assert!((lr_at(0.1, 50, 100).unwrap() - 0.05).abs() < 1e-15);
        assert!(lr_at(0.1, 101, 100).is_err());
    }

    #[test]
    fn extreme_rates_give_constant_masks() {
        let mut st = ReplacementState::new(9, Granularity::PerLayer);
        let ones = st.sample(5, 1.0, &[10, 20, 30]).unwrap();
        assert_eq!(ones, ReplacementMask::PerLayer(vec![true, true, true]));
        let zeros = st.sample(5, 0.0, &[10, 20, 30]).unwrap();
        assert_eq!(zeros, ReplacementMask::PerLayer(vec![false, false, false]));
    }

    #[test]
    fn global_draw_statistics_and_reproducibility() {
        let mut st = ReplacementState::new(1234, Granularity::Global);
        let n = 10_000u64;
        let mut on = 0usize;
        for t in 0..n {
            if st.sample(t, 0.8, &[1]).unwrap() == ReplacementMask::Global(true) {
                on += 1;
            }
        }
        let mean = on as f64 / n as f64;
        assert!((0.788..=0.812).contains(&mean), "mean {mean}");

        let mut st2 = ReplacementState::new(1234, Granularity::Global);
        for t in 0..100 {
            assert_eq!(st.sample(t, 0.8, &[1]).unwrap(), st2.sample(t, 0.8, &[1]).unwrap());
        }
    }

    #[test]
    fn per_element_masks_reproducible_and_sized() {
        let mut a = ReplacementState::new(7, Granularity::PerElement);
        let mut b = ReplacementState::new(7, Granularity::PerElement);
        let ma = a.sample(3, 0.5, &[17, 5]).unwrap();
        let mb = b.sample(3, 0.5, &[17, 5]).unwrap();
        assert_eq!(ma, mb);
        if let ReplacementMask::PerElement(v) = ma {
            assert_eq!(v[0].len(), 17);
            assert_eq!(v[1].len(), 5);
        } else {
            panic!("wrong granularity");
        }
    }

    #[test]
    fn mix_selects_per_element() {
        let out = mix_precision(&[0.7f64], &[1.0], &[true]).unwrap();
        assert_eq!(out, vec![1.0]);
        let f = [1.0f64, 2.0, 3.0];
        let q = [10.0f64, 20.0, 30.0];
        assert_eq!(mix_precision(&f, &q, &[true]).unwrap(), q.to_vec());
        assert_eq!(mix_precision(&f, &q, &[false]).unwrap(), f.to_vec());
        let mixed = mix_precision(&f, &q, &[true, false, true]).unwrap();
        assert_eq!(mixed, vec![10.0, 2.0, 30.0]);
        // every output element comes from exactly one input
        for (i, &v) in mixed.iter().enumerate() {
            assert!(v == f[i] || v == q[i]);
        }
        assert!(mix_precision(&f, &q, &[true, false]).is_err());
    }
}
