//! Synthetic datasets: an in-memory linearly-separable cluster set for fast
//! tests, and a procedural image set written in CIFAR-10 binary format for
//! desk-scale training runs.

use super::{normalize_pair, Dataset, RawSet};
use crate::error::{Error, Result};
use crate::rng;
use std::fs;
use std::path::Path;

const SYNTH_STREAM: u64 = 0x53_594e;

fn cluster_raw(n: usize, classes: usize, seed: u64, index_offset: u64) -> RawSet {
    let dim = 8 * 8;
    let separation = 6.0;
    // class means: random directions scaled well beyond the unit noise
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let v: Vec<f64> = (0..dim)
                .map(|f| rng::normal(seed, &[SYNTH_STREAM, 0, c as u64, f as u64]))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u8);
        for (f, &m) in means[c].iter().enumerate() {
            let noise = rng::normal(seed, &[SYNTH_STREAM, 1, index_offset + i as u64, f as u64]);
            images.push((m + noise) as f32);
        }
    }
    RawSet { images, labels, shape: (1, 8, 8) }
}

/// Gaussian class clusters on a 1x8x8 grid, linearly separable by a wide
/// margin. Labels cycle 0..classes so every prefix is class-balanced.
pub fn synth_dataset(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Contract(format!("n = {n} smaller than {classes} classes")));
    }
    let train = cluster_raw(n, classes, seed, 0);
    let empty = RawSet { images: Vec::new(), labels: Vec::new(), shape: (1, 8, 8) };
    let (ds, _) = normalize_pair("synth", classes, train, empty)?;
    Ok(ds)
}

/// Train/test split of the cluster set; test samples draw from a disjoint
/// index range and both splits are normalized with the training statistics.
pub fn synth_pair(n_train: usize, n_test: usize, classes: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n_train < classes || n_test < 1 {
        return Err(Error::Contract(format!(
            "need at least {classes} train and 1 test samples, got {n_train}/{n_test}"
        )));
    }
    let train = cluster_raw(n_train, classes, seed, 0);
    let test = cluster_raw(n_test, classes, seed, n_train as u64);
    normalize_pair("synth", classes, train, test)
}

// ---- procedural CIFAR-format image set ----

const CANVAS: usize = 40;
const IMG: usize = 32;
const SHIFT: usize = 4;
// signal-to-noise of the rendered classes; chosen so full-precision models
// reach high accuracy while 2-bit models are measurably stressed
const AMPLITUDE: f64 = 42.0;
const NOISE: f64 = 26.0;

/// Smooth per-class template on a padded canvas, one per channel. The
/// horizontal profile is symmetric about the canvas center so mirrored
/// crops keep their class identity.
fn class_template(class: u64, channel: u64, seed: u64) -> Vec<f64> {
    let mut t = vec![0.0f64; CANVAS * CANVAS];
    let cx = (CANVAS as f64 - 1.0) / 2.0;
    for comp in 0..3u64 {
        let k = |slot: u64| rng::uniform(seed, &[SYNTH_STREAM, 2, class, channel, comp, slot]);
        let fy = 1.0 + (k(0) * 3.0).floor();
        let fx = 1.0 + (k(1) * 2.0).floor();
        let py = k(2) * std::f64::consts::TAU;
        let amp = 0.5 + k(3);
        for y in 0..CANVAS {
            let wy = (std::f64::consts::TAU * fy * y as f64 / IMG as f64 + py).cos();
            for x in 0..CANVAS {
                let wx = (std::f64::consts::TAU * fx * (x as f64 - cx).abs() / IMG as f64).cos();
                t[y * CANVAS + x] += amp * wy * wx;
            }
        }
    }
    // unit spread so AMPLITUDE means the same thing for every class
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let std = (t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64)
        .sqrt()
        .max(1e-9);
    for v in t.iter_mut() {
        *v = (*v - mean) / std;
    }
    t
}

fn render_record(templates: &[Vec<f64>], class: usize, sample: u64, split: u64, seed: u64, out: &mut Vec<u8>) {
    out.push(class as u8);
    let dy = (rng::key(seed, &[SYNTH_STREAM, 3, split, sample, 0]) % (2 * SHIFT as u64 + 1)) as usize;
    let dx = (rng::key(seed, &[SYNTH_STREAM, 3, split, sample, 1]) % (2 * SHIFT as u64 + 1)) as usize;
    for ch in 0..3usize {
        let t = &templates[class * 3 + ch];
        for y in 0..IMG {
            for x in 0..IMG {
                let signal = t[(y + dy) * CANVAS + (x + dx)];
                let noise = rng::normal(seed, &[SYNTH_STREAM, 4, split, sample, (ch * IMG * IMG + y * IMG + x) as u64]);
                let v = 128.0 + AMPLITUDE * signal + NOISE * noise;
                out.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// Write a deterministic, class-structured image dataset in the exact
/// CIFAR-10 binary layout: data_batch_1..5.bin plus test_batch.bin.
/// Labels cycle 0..10 so any training prefix stays class-balanced.
pub fn write_synthetic_cifar10(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let templates: Vec<Vec<f64>> = (0..10u64)
        .flat_map(|c| (0..3u64).map(move |ch| (c, ch)))
        .map(|(c, ch)| class_template(c, ch, seed))
        .collect();
    let per_file = n_train.div_ceil(5);
    let mut written = 0usize;
    for file in 0..5usize {
        let count = per_file.min(n_train - written);
        let mut bytes = Vec::with_capacity(count * 3073);
        for s in 0..count {
            let i = written + s;
            render_record(&templates, i % 10, i as u64, 0, seed, &mut bytes);
        }
        fs::write(dir.join(format!("data_batch_{}.bin", file + 1)), bytes)?;
        written += count;
    }
    let mut bytes = Vec::with_capacity(n_test * 3073);
    for i in 0..n_test {
        render_record(&templates, i % 10, i as u64, 1, seed, &mut bytes);
    }
    fs::write(dir.join("test_batch.bin"), bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn same_seed_gives_identical_datasets() {
        let a = synth_dataset(100, 4, 9).unwrap();
        let b = synth_dataset(100, 4, 9).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = synth_dataset(100, 4, 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn rejects_fewer_samples_than_classes() {
        assert!(matches!(synth_dataset(5, 10, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_probe_separates_the_clusters() {
        let ds = synth_dataset(1000, 2, 33).unwrap();
        let dim = ds.image_numel();
        // logistic-style probe trained by plain gradient descent
        let mut w = vec![0.0f64; 2 * dim];
        let mut b = vec![0.0f64; 2];
        let labels: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
        let images: Vec<f64> = ds.images.iter().map(|&v| v as f64).collect();
        for _ in 0..60 {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(images.clone(), &[1000, dim], false).unwrap();
            let wt = g.leaf(w.clone(), &[2, dim], true).unwrap();
            let bt = g.leaf(b.clone(), &[2], true).unwrap();
            let logits = g.linear(x, wt, bt).unwrap();
            let loss = g.cross_entropy(logits, &labels).unwrap();
            g.backward(loss).unwrap();
            for (wi, gi) in w.iter_mut().zip(g.grad(wt).unwrap()) {
                *wi -= 0.5 * gi;
            }
            for (bi, gi) in b.iter_mut().zip(g.grad(bt).unwrap()) {
                *bi -= 0.5 * gi;
            }
        }
        let mut g = Graph::<f64>::new();
        let x = g.leaf(images, &[1000, dim], false).unwrap();
        let wt = g.leaf(w, &[2, dim], false).unwrap();
        let bt = g.leaf(b, &[2], false).unwrap();
        let logits = g.linear(x, wt, bt).unwrap();
        let z = g.data(logits);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let row = &z[i * 2..(i + 1) * 2];
                (row[1] > row[0]) as usize == l
            })
            .count();
        assert!(correct >= 990, "linear probe accuracy {}/1000", correct);
    }

    #[test]
    fn cifar_format_writer_roundtrips_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar10(dir.path(), 200, 50, 77).unwrap();
        let (train, test) = super::super::load_cifar10_bin(dir.path(), None).unwrap();
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 50);
        assert_eq!(train.shape, (3, 32, 32));
        // balanced prefix
        let first10: Vec<u8> = train.labels[..10].to_vec();
        assert_eq!(first10, (0..10).map(|c| c as u8).collect::<Vec<_>>());
        // normalization: per-channel mean ~0, std ~1 on the training set
        let hw = 1024;
        for ch in 0..3 {
            let vals: Vec<f32> = (0..train.len())
                .flat_map(|i| train.image(i)[ch * hw..(ch + 1) * hw].to_vec())
                .collect();
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 0.05, "channel {ch} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 0.1, "channel {ch} std {}", var.sqrt());
        }
    }
}
