//! SGD with momentum (optionally Nesterov) and bias-corrected Adam.

use crate::config::OptKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// v <- momentum * v + g; then p -= lr * v (or lr * (momentum * v + g) with
/// Nesterov).
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    nesterov: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim("sgd_momentum_step", "parameter/gradient/state lengths"));
    }
    let lr = T::from_f64(lr);
    let mom = T::from_f64(momentum);
    for i in 0..params.len() {
        velocity[i] = mom * velocity[i] + grads[i];
        let update = if nesterov { mom * velocity[i] + grads[i] } else { velocity[i] };
        params[i] = params[i] - lr * update;
    }
    Ok(())
}

/// Standard bias-corrected Adam update. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::dim("adam_step", "parameter/gradient/state lengths"));
    }
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - beta2.powi(t as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(eps);
    for i in 0..params.len() {
        m[i] = b1 * m[i] + (one - b1) * grads[i];
        v[i] = b2 * v[i] + (one - b2) * grads[i] * grads[i];
        let mhat = m[i] / corr1;
        let vhat = v[i] / corr2;
        params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter optimizer state for a whole model.
pub struct Optimizer<T: Scalar> {
    pub kind: OptKind,
    pub momentum: f64,
    pub nesterov: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 1-based Adam step counter (number of optimizer steps taken).
    pub step_count: u64,
    /// First slot: SGD velocity or Adam m. Second: Adam v.
    pub slot_m: Vec<Vec<T>>,
    pub slot_v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptKind, momentum: f64, nesterov: bool, param_sizes: &[usize]) -> Self {
        Optimizer {
            kind,
            momentum,
            nesterov,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            slot_m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            slot_v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Apply one update to parameter `idx` with its gradient.
    pub fn update(&mut self, idx: usize, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        match self.kind {
            OptKind::SgdMomentum => sgd_momentum_step(
                params,
                grads,
                &mut self.slot_m[idx],
                lr,
                self.momentum,
                self.nesterov,
            ),
            OptKind::Adam => adam_step(
                params,
                grads,
                &mut self.slot_m[idx],
                &mut self.slot_v[idx],
                self.step_count,
                lr,
                self.beta1,
                self.beta2,
                self.eps,
            ),
        }
    }

    /// Call once per global step before updating parameters.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_single_step() {
        let mut p = vec![1.0f64];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.0, false).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_over_two_steps() {
        let mut p = vec![0.0f64];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, false).unwrap();
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, false).unwrap();
        // v1 = 1, v2 = 1.9 -> total -0.29
        assert!((p[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_freezes_params() {
        let mut p = vec![3.0f64, -2.0];
        let mut v = vec![0.5, 0.5];
        sgd_momentum_step(&mut p, &[1.0, 1.0], &mut v, 0.0, 0.9, true).unwrap();
        assert_eq!(p, vec![3.0, -2.0]);
    }

    #[test]
    fn first_adam_step_moves_by_about_lr() {
        let mut p = vec![0.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-8, "step {}", p[0]);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![1.5f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut p, &[0.0], &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.5]);
    }

    #[test]
    fn adam_treats_equal_gradients_equally() {
        let mut p = vec![1.0f64, 1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.3, 0.3], &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![0.0f64];
        let mut v = vec![0.0, 0.0];
        assert!(sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, false).is_err());
    }
}
