//! Named gradient and estimator checks behind the `gradcheck` CLI command.
//! Every differentiable op is compared against the central-difference oracle
//! on seeded random instances at 64-bit precision; the estimator identities
//! are checked exactly.

use crate::error::Result;
use crate::estimators;
use crate::quantizer::{self, ClipFamily, QuantizerSpec, RoundFamily};
use crate::rng;
use crate::tensor::gradcheck::{finite_diff_grad, rel_error};
use crate::tensor::{Graph, TensorId};

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub max_rel_err: f64,
    pub detail: String,
}

pub const ALL_CHECKS: &[&str] = &[
    "matmul",
    "conv2d",
    "relu",
    "cross_entropy",
    "linear",
    "batch_norm",
    "max_pool2",
    "clip",
    "estimators",
];

const TOL: f64 = 1e-4;
const FD_H: f64 = 1e-5;
const INSTANCES: u64 = 10;

fn randn(seed: u64, n: usize) -> Vec<f64> {
    (0..n).map(|i| rng::normal(seed, &[i as u64])).collect()
}

/// Generic oracle sweep: `build` must consume its input as the graph's
/// first leaf and return a scalar loss node.
fn sweep<F>(name: &'static str, seed0: u64, n_inputs: usize, build: F) -> CheckReport
where
    F: Fn(&mut Graph<f64>, &[f64]) -> Result<TensorId>,
{
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let x0 = randn(seed0 + inst, n_inputs);
        let analytic = (|| -> Result<Vec<f64>> {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(x0.clone(), &[n_inputs], true)?;
            let loss = build(&mut g, &x0)?;
            g.backward(loss)?;
            Ok(g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n_inputs]))
        })();
        let analytic = match analytic {
            Ok(a) => a,
            Err(e) => {
                return CheckReport { name, passed: false, max_rel_err: f64::INFINITY, detail: e.to_string() }
            }
        };
        let fd = finite_diff_grad(
            |v: &[f64]| {
                let mut g = Graph::<f64>::new();
                g.leaf(v.to_vec(), &[n_inputs], true)?;
                let loss = build(&mut g, v)?;
                Ok(g.data(loss)[0])
            },
            &x0,
            FD_H,
        );
        let fd = match fd {
            Ok(f) => f,
            Err(e) => {
                return CheckReport { name, passed: false, max_rel_err: f64::INFINITY, detail: e.to_string() }
            }
        };
        worst = worst.max(rel_error(&analytic, &fd));
    }
    CheckReport {
        name,
        passed: worst < TOL,
        max_rel_err: worst,
        detail: format!("{INSTANCES} instances, tolerance {TOL:.0e}"),
    }
}

fn weighted_sum(g: &mut Graph<f64>, y: TensorId, seed: u64) -> Result<TensorId> {
    let n = g.numel(y);
    let shape = g.shape(y).to_vec();
    let coef = g.constant(randn(seed, n), &shape)?;
    let p = g.mul(y, coef)?;
    g.sum(p)
}

fn check_matmul() -> CheckReport {
    sweep("matmul", 100, 12, |g, _| {
        let x = TensorId(0);
        let xm = g.reshape(x, &[3, 4])?;
        let b = g.constant(randn(42, 20), &[4, 5])?;
        let y = g.matmul(xm, b)?;
        weighted_sum(g, y, 43)
    })
}

fn check_conv2d() -> CheckReport {
    sweep("conv2d", 200, 2 * 3 * 6 * 6, |g, _| {
        let x = TensorId(0);
        let xm = g.reshape(x, &[2, 3, 6, 6])?;
        let w = g.constant(randn(44, 4 * 3 * 9), &[4, 3, 3, 3])?;
        let y = g.conv2d(xm, w, 2, 1)?;
        weighted_sum(g, y, 45)
    })
}

fn check_relu() -> CheckReport {
    // keep sample points away from the kink at 0
    sweep("relu", 300, 24, |g, x0| {
        let x = TensorId(0);
        let shift: Vec<f64> = x0.iter().map(|&v| if v.abs() < 1e-3 { 0.5 } else { 0.0 }).collect();
        let sh = g.constant(shift, &[24])?;
        let moved = g.add(x, sh)?;
        let y = g.relu(moved)?;
        weighted_sum(g, y, 46)
    })
}

fn check_cross_entropy() -> CheckReport {
    sweep("cross_entropy", 400, 20, |g, _| {
        let x = TensorId(0);
        let z = g.reshape(x, &[4, 5])?;
        g.cross_entropy(z, &[0, 3, 4, 1])
    })
}

fn check_linear() -> CheckReport {
    sweep("linear", 500, 12, |g, _| {
        let x = TensorId(0);
        let xm = g.reshape(x, &[3, 4])?;
        let w = g.constant(randn(47, 8), &[2, 4])?;
        let b = g.constant(randn(48, 2), &[2])?;
        let y = g.linear(xm, w, b)?;
        weighted_sum(g, y, 49)
    })
}

fn check_batch_norm() -> CheckReport {
    sweep("batch_norm", 600, 24, |g, _| {
        let x = TensorId(0);
        let xm = g.reshape(x, &[3, 2, 2, 2])?;
        let gamma = g.constant(vec![1.2, 0.8], &[2])?;
        let beta = g.constant(vec![0.1, -0.3], &[2])?;
        let (y, _, _) = g.batch_norm_train(xm, gamma, beta, 1e-5)?;
        weighted_sum(g, y, 50)
    })
}

fn check_max_pool2() -> CheckReport {
    sweep("max_pool2", 700, 32, |g, _| {
        let x = TensorId(0);
        let xm = g.reshape(x, &[1, 2, 4, 4])?;
        let y = g.max_pool2(xm)?;
        weighted_sum(g, y, 51)
    })
}

/// Clip stage vs the oracle, away from the kinks, for every family; also the
/// clip-parameter gradients.
fn check_clip() -> CheckReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        for (spec, alpha) in [
            (QuantizerSpec::new(2, ClipFamily::Pact, RoundFamily::Activation).unwrap(), vec![1.5f64]),
            (QuantizerSpec::new(2, ClipFamily::Interval, RoundFamily::Activation).unwrap(), vec![-0.8, 0.9]),
            (QuantizerSpec::new(2, ClipFamily::FixedUnit, RoundFamily::Activation).unwrap(), vec![]),
        ] {
            // sample inputs away from the clip kinks
            let x: Vec<f64> = randn(800 + inst, 16)
                .into_iter()
                .map(|v| v * 0.8)
                .filter(|&v| {
                    let near = |a: f64| (v - a).abs() < 1e-3;
                    match spec.clip {
                        ClipFamily::Pact => !near(0.0) && !near(alpha[0]),
                        ClipFamily::Interval => !near(alpha[0]) && !near(alpha[1]),
                        ClipFamily::FixedUnit => !near(0.0) && !near(1.0),
                    }
                })
                .collect();
            if x.is_empty() {
                continue;
            }
            // input gradient of sum(clip_norm(x))
            let analytic: Vec<f64> = quantizer::clip_input_slope(&x, &spec, &alpha);
            let fd = finite_diff_grad(
                |v: &[f64]| Ok(quantizer::clip_norm(v, &spec, &alpha)?.iter().sum()),
                &x,
                FD_H,
            )
            .unwrap();
            worst = worst.max(rel_error(&analytic, &fd));
            // clip parameter gradients (straight-through definition is the
            // clip-only path)
            if !alpha.is_empty() {
                let up = vec![1.0; x.len()];
                let ga = quantizer::clip_param_grad(&x, &spec, &alpha, &up).unwrap();
                let fd = finite_diff_grad(
                    |a: &[f64]| Ok(quantizer::clip_forward(&x, &spec, a)?.iter().sum()),
                    &alpha,
                    FD_H,
                )
                .unwrap();
                worst = worst.max(rel_error(&ga, &fd));
            }
        }
    }
    CheckReport {
        name: "clip",
        passed: worst < TOL,
        max_rel_err: worst,
        detail: format!("all clip families, kinks excluded, tolerance {TOL:.0e}"),
    }
}

/// Exact estimator identities on random tuples.
fn check_estimators() -> CheckReport {
    let mut worst = 0.0f64;
    let mut bitwise_ok = true;
    for seed in 0..200u64 {
        let n = 32;
        let g: Vec<f64> = (0..n).map(|i| rng::normal(900 + seed, &[i as u64])).collect();
        let c: Vec<f64> = (0..n).map(|i| 0.01 + 0.98 * rng::uniform(901 + seed, &[i as u64])).collect();
        let q: Vec<f64> = (0..n).map(|i| rng::uniform(902 + seed, &[i as u64])).collect();
        let mu = rng::uniform(903 + seed, &[0]) * 0.5;
        let ste = estimators::ste_backward(&g, &c, &q).unwrap();
        let pege = estimators::pege_backward(&g, &c, &q, mu).unwrap();
        let ewgs0 = estimators::ewgs_backward(&g, &c, &q, 0.0).unwrap();
        let pege0 = estimators::pege_backward(&g, &c, &q, 0.0).unwrap();
        for i in 0..n {
            worst = worst.max((pege[i] - ste[i] - mu * (c[i] - q[i])).abs());
            bitwise_ok &= ste[i].to_bits() == ewgs0[i].to_bits();
            bitwise_ok &= ste[i].to_bits() == pege0[i].to_bits();
        }
    }
    CheckReport {
        name: "estimators",
        passed: worst < 1e-12 && bitwise_ok,
        max_rel_err: worst,
        detail: "additive identity to 1e-12; zero-coefficient cases bitwise".into(),
    }
}

/// Run one named check, or all of them.
pub fn run(which: Option<&str>) -> Vec<CheckReport> {
    let run_one = |name: &str| -> Option<CheckReport> {
        Some(match name {
            "matmul" => check_matmul(),
            "conv2d" => check_conv2d(),
            "relu" => check_relu(),
            "cross_entropy" => check_cross_entropy(),
            "linear" => check_linear(),
            "batch_norm" => check_batch_norm(),
            "max_pool2" => check_max_pool2(),
            "clip" => check_clip(),
            "estimators" => check_estimators(),
            _ => return None,
        })
    };
    match which {
        Some(name) => run_one(name).into_iter().collect(),
        None => ALL_CHECKS.iter().filter_map(|n| run_one(n)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_full_suite_passes() {
        let reports = run(None);
        assert_eq!(reports.len(), ALL_CHECKS.len());
        for r in &reports {
            assert!(r.passed, "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn unknown_names_return_nothing() {
        assert!(run(Some("nonsense")).is_empty());
    }
}
