//! Training loop: schedules advance per global step, estimators fire at the
//! quantization nodes, and the optimizer updates only the latent
//! full-precision weights and the quantizer clip parameters.

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::config::{DataName, TrainConfig};
use crate::curriculum::{lr_at, MuSchedule, RateSchedule, ReplacementState};
use crate::data::{self, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::metrics::{emit_metrics, MetricsRecord};
use crate::models::{self, build_model, Mode, Model, ModelSpec, ParamKind, SiteRole, StepCtx};
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Where to write metrics.csv, best.ckpt and final.ckpt (None: no files).
    pub out_dir: Option<PathBuf>,
    /// Background batch preparation. Disabling it also zeroes the wall-clock
    /// column so emitted artifacts are bit-reproducible.
    pub prefetch: bool,
    pub seed_override: Option<u64>,
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { out_dir: None, prefetch: true, seed_override: None, verbose: false }
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
}

/// Load the configured dataset pair (train, test).
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.name {
        DataName::Cifar10 => data::load_cifar10_bin(&cfg.data.dir, cfg.data.subset_n),
        DataName::Mnist => data::load_mnist_idx(&cfg.data.dir, cfg.data.subset_n),
        DataName::Synth => {
            let n = cfg.data.subset_n.unwrap_or(2000);
            data::synth_pair(n, (n / 5).max(cfg.model.classes), cfg.model.classes, cfg.train.seed)
        }
    }
}

/// Replacement-rate schedule for a run of `total_steps`.
pub fn rate_schedule(cfg: &TrainConfig, total_steps: u64) -> Result<RateSchedule> {
    let t_full = (cfg.replace.t_full_frac * total_steps as f64).max(1.0);
    RateSchedule::new(cfg.replace.family, cfg.replace.p0, t_full, cfg.replace.base, cfg.replace.p0)
}

/// Mu schedule; a zero coefficient derives one reaching 0.99 * max at 80%
/// of the run.
pub fn mu_schedule(cfg: &TrainConfig, total_steps: u64) -> Result<MuSchedule> {
    if cfg.mu.k == 0.0 {
        let mut s = MuSchedule::exponential_for_run(cfg.mu.max, total_steps);
        s.family = cfg.mu.family;
        Ok(s)
    } else {
        MuSchedule::new(cfg.mu.family, cfg.mu.max, cfg.mu.k, (0.8 * total_steps as f64).max(1.0), 10.0)
    }
}

/// Serialize model (and optionally optimizer) state as named arrays.
pub fn state_arrays<T: Scalar>(model: &Model<T>, opt: Option<&Optimizer<T>>) -> Vec<NamedArray> {
    let mut arrays = Vec::new();
    for e in &model.params.entries {
        arrays.push(NamedArray {
            name: format!("param.{}", e.name),
            shape: e.shape.clone(),
            data: e.data.iter().map(|v| v.as_f32()).collect(),
        });
    }
    for (i, s) in model.bn_states.iter().enumerate() {
        arrays.push(NamedArray {
            name: format!("bn{i}.mean"),
            shape: vec![s.mean.len()],
            data: s.mean.iter().map(|v| v.as_f32()).collect(),
        });
        arrays.push(NamedArray {
            name: format!("bn{i}.var"),
            shape: vec![s.var.len()],
            data: s.var.iter().map(|v| v.as_f32()).collect(),
        });
    }
    if let Some(opt) = opt {
        for (i, e) in model.params.entries.iter().enumerate() {
            arrays.push(NamedArray {
                name: format!("opt.m.{}", e.name),
                shape: e.shape.clone(),
                data: opt.slot_m[i].iter().map(|v| v.as_f32()).collect(),
            });
            arrays.push(NamedArray {
                name: format!("opt.v.{}", e.name),
                shape: e.shape.clone(),
                data: opt.slot_v[i].iter().map(|v| v.as_f32()).collect(),
            });
        }
    }
    arrays
}

/// Restore every parameter and batch-norm state from a checkpoint saved for
/// this exact configuration. Mismatched names or shapes are checkpoint
/// errors.
pub fn load_state<T: Scalar>(model: &mut Model<T>, ck: &Checkpoint) -> Result<()> {
    for e in model.params.entries.iter_mut() {
        let name = format!("param.{}", e.name);
        let a = ck
            .array(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        if a.shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} in file, model expects {:?}",
                a.shape, e.shape
            )));
        }
        e.data = a.data.iter().map(|&v| T::from_f32(v)).collect();
    }
    for (i, s) in model.bn_states.iter_mut().enumerate() {
        for (field, dst) in [("mean", &mut s.mean), ("var", &mut s.var)] {
            let name = format!("bn{i}.{field}");
            let a = ck
                .array(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if a.data.len() != dst.len() {
                return Err(Error::Checkpoint(format!("{name}: wrong length")));
            }
            *dst = a.data.iter().map(|&v| T::from_f32(v)).collect();
        }
    }
    Ok(())
}

/// Warm-start from a full-precision checkpoint: load weights, biases and
/// normalization state, then re-derive quantizer clip parameters from the
/// loaded weight statistics. Quantizer parameters in the file are ignored.
pub fn init_from_pretrained<T: Scalar>(model: &mut Model<T>, path: &std::path::Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    for e in model.params.entries.iter_mut() {
        if e.kind == ParamKind::Alpha {
            continue;
        }
        let name = format!("param.{}", e.name);
        let a = ck
            .array(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name} (architecture mismatch?)")))?;
        if a.shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} in file, model expects {:?}",
                a.shape, e.shape
            )));
        }
        e.data = a.data.iter().map(|&v| T::from_f32(v)).collect();
    }
    for (i, s) in model.bn_states.iter_mut().enumerate() {
        for (field, dst) in [("mean", &mut s.mean), ("var", &mut s.var)] {
            let name = format!("bn{i}.{field}");
            if let Some(a) = ck.array(&name) {
                if a.data.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("{name}: wrong length")));
                }
                *dst = a.data.iter().map(|&v| T::from_f32(v)).collect();
            }
        }
    }
    // warm-start clip parameters from the loaded weights
    for si in 0..model.sites.len() {
        let (w_spec, w_param, w_alpha) = {
            let s = &model.sites[si];
            (s.w_spec, s.w_param, s.w_alpha)
        };
        if let Some(aid) = w_alpha {
            let alpha = crate::quantizer::init_alpha(
                &w_spec,
                &model.params.entries[w_param].data,
                model.spec.quant.pact_init_m,
            )?;
            model.params.entries[aid].data = alpha;
        }
        model.a_alpha_ready[si] = false;
    }
    Ok(())
}

pub fn make_checkpoint<T: Scalar>(
    model: &Model<T>,
    opt: Option<&Optimizer<T>>,
    step: u64,
    seed: u64,
    descriptor: String,
) -> Checkpoint {
    Checkpoint { step, seed, descriptor, arrays: state_arrays(model, opt) }
}

/// Full training run per the config. Returns the trained model and the
/// metrics series; optionally writes metrics.csv, best.ckpt, final.ckpt.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed_override {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let (train_ds, test_ds) = load_data(&cfg)?;
    let mspec = ModelSpec {
        arch: cfg.model.arch,
        width: cfg.model.width,
        classes: cfg.model.classes,
        input_shape: train_ds.shape,
        quant: cfg.quant.clone(),
        seed: cfg.train.seed,
    };
    let mut model = build_model::<f32>(&mspec)?;
    if let Some(p) = cfg.model.pretrained_path.clone() {
        init_from_pretrained(&mut model, &p)?;
    }

    let it = BatchIterator::new(
        Arc::new(train_ds),
        cfg.data.batch,
        cfg.train.seed,
        true,
        cfg.data.augment,
    )?;
    let steps_per_epoch = it.batches_per_epoch() as u64;
    let total_steps = cfg.train.epochs as u64 * steps_per_epoch;
    let rate = rate_schedule(&cfg, total_steps)?;
    let mu = mu_schedule(&cfg, total_steps)?;
    let mut opt = Optimizer::<f32>::new(
        cfg.train.optimizer,
        cfg.train.momentum,
        cfg.train.nesterov,
        &model.params.sizes(),
    );
    let mut repl = ReplacementState::new(cfg.train.seed, cfg.replace.granularity);
    let site_sizes = model.site_weight_sizes();
    let site_names: Vec<String> = model.sites.iter().map(|s| s.layer_name.clone()).collect();
    let replace_weights = !site_sizes.is_empty();

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut best_acc = -1.0f64;
    let mut final_acc = 0.0f64;
    let mut step: u64 = 0;

    for epoch in 0..cfg.train.epochs {
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut disc_sum = vec![0.0f64; site_names.len()];
        let mut disc_n = vec![0usize; site_names.len()];

        for batch in data::stream_epoch(&it, epoch as u64, opts.prefetch) {
            let p_t = rate.rate_at(step);
            let mu_t = mu.mu_at(step);
            let lr_t = lr_at(cfg.train.lr, step, total_steps)?;
            let mask = if replace_weights {
                Some(repl.sample(step, p_t, &site_sizes)?)
            } else {
                None
            };
            let est = EstimatorConfig { kind: cfg.estimator.kind, mu: mu_t, delta: cfg.estimator.delta };
            est.validate()?;
            let mut g = crate::tensor::Graph::<f32>::new();
            let ctx = StepCtx {
                mode: Mode::Train,
                estimator: est,
                mask: mask.as_ref(),
                replace_activations: cfg.replace.activations,
            };
            let run = model
                .forward_quantized(&mut g, &batch.images, batch.size, &ctx)
                .map_err(|e| diverged(e, step))?;
            let loss_id = g.cross_entropy(run.logits, &batch.labels).map_err(|e| diverged(e, step))?;
            let loss = g.data(loss_id)[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, msg: format!("loss = {loss}") });
            }
            g.backward(loss_id).map_err(|e| diverged(e, step))?;

            // batch top-1 on the training forward
            let logits = g.data(run.logits);
            let classes = cfg.model.classes;
            for (r, &label) in batch.labels.iter().enumerate() {
                let row = &logits[r * classes..(r + 1) * classes];
                let mut arg = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = j;
                    }
                }
                if arg == label {
                    correct += 1;
                }
            }
            loss_sum += loss * batch.size as f64;
            seen += batch.size;
            for s in &run.sites {
                if s.role == SiteRole::Weight {
                    disc_sum[s.site] += s.disc_err;
                    disc_n[s.site] += 1;
                }
            }

            opt.begin_step();
            for (pid, leaf) in run.param_leaf.iter().enumerate() {
                let Some(leaf) = leaf else { continue };
                let Some(grad) = g.grad(*leaf) else { continue };
                let entry = &mut model.params.entries[pid];
                if cfg.train.weight_decay > 0.0 && entry.kind == ParamKind::Weight {
                    let wd = cfg.train.weight_decay as f32;
                    let gd: Vec<f32> = grad.iter().zip(&entry.data).map(|(&g, &p)| g + wd * p).collect();
                    opt.update(pid, &mut entry.data, &gd, lr_t)?;
                } else {
                    let gd = grad.to_vec();
                    opt.update(pid, &mut entry.data, &gd, lr_t)?;
                }
            }
            step += 1;
        }

        let last = epoch + 1 == cfg.train.epochs;
        if (epoch + 1) % cfg.train.eval_period == 0 || last {
            let test_acc = models::evaluate(&mut model, &test_ds, 256)?;
            let record = MetricsRecord {
                epoch,
                step,
                train_loss: loss_sum / seen.max(1) as f64,
                train_acc: 100.0 * correct as f64 / seen.max(1) as f64,
                test_acc,
                p_t: rate.rate_at(step),
                mu_t: mu.mu_at(step),
                lr: lr_at(cfg.train.lr, step, total_steps)?,
                disc_err: site_names
                    .iter()
                    .cloned()
                    .zip(disc_sum.iter().zip(&disc_n).map(|(s, &n)| s / n.max(1) as f64))
                    .collect(),
                secs: if opts.prefetch { started.elapsed().as_secs_f64() } else { 0.0 },
            };
            if opts.verbose {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train {:.2}%  test {:.2}%  p {:.3}  mu {:.4}  lr {:.5}",
                    epoch, record.train_loss, record.train_acc, record.test_acc, record.p_t, record.mu_t, record.lr
                );
            }
            metrics.push(record);
            final_acc = test_acc;
            if test_acc >= best_acc {
                best_acc = test_acc;
                if let Some(dir) = &opts.out_dir {
                    make_checkpoint(&model, Some(&opt), step, cfg.train.seed, cfg.to_text())
                        .save(&dir.join("best.ckpt"))?;
                }
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        make_checkpoint(&model, Some(&opt), step, cfg.train.seed, cfg.to_text())
            .save(&dir.join("final.ckpt"))?;
        if !metrics.is_empty() {
            emit_metrics(&metrics, &dir.join("metrics.csv"))?;
        }
    }
    Ok(TrainOutcome { model, metrics, best_test_acc: best_acc, final_test_acc: final_acc })
}

fn diverged(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged { step, msg: format!("non-finite output of {op}") },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchKind;

    fn quick_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.arch = ArchKind::Mlp;
        cfg.data.subset_n = Some(320);
        cfg.data.batch = 64;
        cfg.train.epochs = 2;
        cfg.train.lr = 0.01;
        cfg.train.seed = 5;
        cfg
    }

    #[test]
    fn zero_epochs_is_a_no_op_run() {
        let mut cfg = quick_cfg();
        cfg.train.epochs = 0;
        let out = train(&cfg, &TrainOptions::default()).unwrap();
        let fresh = build_model::<f32>(&ModelSpec {
            arch: cfg.model.arch,
            width: cfg.model.width,
            classes: cfg.model.classes,
            input_shape: (1, 8, 8),
            quant: cfg.quant.clone(),
            seed: cfg.train.seed,
        })
        .unwrap();
        for (a, b) in out.model.params.entries.iter().zip(&fresh.params.entries) {
            assert_eq!(a.data, b.data, "{}", a.name);
        }
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn separable_data_trains_to_high_accuracy_at_full_precision() {
        let mut cfg = quick_cfg();
        cfg.quant.bits_w = 32;
        cfg.quant.bits_a = 32;
        cfg.data.subset_n = Some(640);
        cfg.train.epochs = 20; // 200 steps at batch 64
        let out = train(&cfg, &TrainOptions { prefetch: false, ..Default::default() }).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(last.train_acc >= 99.0, "train accuracy {}", last.train_acc);
    }

    #[test]
    fn fixed_seed_and_no_prefetch_reproduce_artifacts_exactly() {
        let cfg = quick_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let run = |dir: &std::path::Path| {
            train(
                &cfg,
                &TrainOptions {
                    out_dir: Some(dir.to_path_buf()),
                    prefetch: false,
                    seed_override: None,
                    verbose: false,
                },
            )
            .unwrap();
            (
                std::fs::read(dir.join("metrics.csv")).unwrap(),
                std::fs::read(dir.join("final.ckpt")).unwrap(),
            )
        };
        let (csv_a, ck_a) = run(dir_a.path());
        let (csv_b, ck_b) = run(dir_b.path());
        assert_eq!(csv_a, csv_b);
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn checkpoint_roundtrip_and_pretrained_warm_start() {
        let mut cfg = quick_cfg();
        cfg.quant.bits_w = 32;
        cfg.quant.bits_a = 32;
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &cfg,
            &TrainOptions { out_dir: Some(dir.path().to_path_buf()), prefetch: false, ..Default::default() },
        )
        .unwrap();
        let path = dir.path().join("final.ckpt");
        // save -> load -> save is byte identical
        let bytes = std::fs::read(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(bytes, ck.encode());

        // load the full-precision weights into a quantized model of the
        // same architecture; evaluation of the FP path must match exactly
        let (train_ds, test_ds) = load_data(&cfg).unwrap();
        let _ = train_ds;
        let mut warm = build_model::<f32>(&ModelSpec {
            arch: cfg.model.arch,
            width: cfg.model.width,
            classes: cfg.model.classes,
            input_shape: (1, 8, 8),
            quant: cfg.quant.clone(),
            seed: 999, // different init, then overwritten by the checkpoint
        })
        .unwrap();
        init_from_pretrained(&mut warm, &path).unwrap();
        let mut reference = out.model;
        let a = models::evaluate(&mut reference, &test_ds, 64).unwrap();
        let b = models::evaluate(&mut warm, &test_ds, 64).unwrap();
        assert_eq!(a, b);

        // wrong architecture is a checkpoint error
        let mut cnn = build_model::<f32>(&ModelSpec {
            arch: ArchKind::SmallCnn,
            width: 1.0,
            classes: 10,
            input_shape: (3, 32, 32),
            quant: cfg.quant.clone(),
            seed: 1,
        })
        .unwrap();
        assert!(matches!(
            init_from_pretrained(&mut cnn, &path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn quantized_training_logs_discretization_error() {
        let mut cfg = quick_cfg();
        cfg.train.epochs = 1;
        let out = train(&cfg, &TrainOptions { prefetch: false, ..Default::default() }).unwrap();
        let rec = out.metrics.last().unwrap();
        assert!(rec.disc_err_mean() > 0.0, "quantized run should report a positive error");
        assert!(rec.p_t >= 0.3 - 1e-9);

        // full-precision bypass reports exactly zero
        cfg.quant.bits_w = 32;
        cfg.quant.bits_a = 32;
        let out = train(&cfg, &TrainOptions { prefetch: false, ..Default::default() }).unwrap();
        assert_eq!(out.metrics.last().unwrap().disc_err_mean(), 0.0);
    }
}
