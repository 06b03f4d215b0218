//! Dataset ingestion (CIFAR-10 binary, MNIST IDX, synthetic), per-channel
//! normalization, shuffled batching with optional crop/flip augmentation,
//! and a bounded-queue prefetcher.

mod cifar;
mod mnist;
mod synth;

pub use cifar::load_cifar10_bin;
pub use mnist::load_mnist_idx;
pub use synth::{synth_dataset, synth_pair, write_synthetic_cifar10};

use crate::error::{Error, Result};
use crate::rng;
use std::sync::mpsc;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: usize,
    /// Per-channel normalization applied to the stored images.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images are stored normalized, as N x C x H x W f32.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub shape: (usize, usize, usize),
    pub labels: Vec<u8>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_numel();
        &self.images[i * n..(i + 1) * n]
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.image_numel() {
            return Err(Error::Format("image payload does not match label count".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.meta.classes) {
            return Err(Error::Format(format!(
                "label {bad} outside [0, {})",
                self.meta.classes
            )));
        }
        Ok(())
    }

    /// Keep only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.image_numel());
        }
    }
}

/// Raw (unnormalized) images plus labels, as produced by the file parsers.
pub(crate) struct RawSet {
    images: Vec<f32>,
    labels: Vec<u8>,
    shape: (usize, usize, usize),
}

/// Compute per-channel mean/std on `train`, then normalize both splits with
/// the training statistics.
pub(crate) fn normalize_pair(
    name: &str,
    classes: usize,
    mut train: RawSet,
    mut test: RawSet,
) -> Result<(Dataset, Dataset)> {
    let (c, h, w) = train.shape;
    let hw = h * w;
    let mut mean = vec![0.0f64; c];
    let mut count = vec![0.0f64; c];
    for (i, &v) in train.images.iter().enumerate() {
        let ch = (i / hw) % c;
        mean[ch] += v as f64;
        count[ch] += 1.0;
    }
    for ch in 0..c {
        mean[ch] /= count[ch].max(1.0);
    }
    let mut var = vec![0.0f64; c];
    for (i, &v) in train.images.iter().enumerate() {
        let ch = (i / hw) % c;
        let d = v as f64 - mean[ch];
        var[ch] += d * d;
    }
    let std: Vec<f64> = var
        .iter()
        .zip(&count)
        .map(|(&v, &n)| (v / n.max(1.0)).sqrt().max(1e-6))
        .collect();
    for set in [&mut train, &mut test] {
        for (i, v) in set.images.iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = ((*v as f64 - mean[ch]) / std[ch]) as f32;
        }
    }
    let meta = DatasetMeta {
        name: name.to_string(),
        classes,
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: std.iter().map(|&s| s as f32).collect(),
    };
    let tr = Dataset { images: train.images, shape: train.shape, labels: train.labels, meta: meta.clone() };
    let te = Dataset { images: test.images, shape: test.shape, labels: test.labels, meta };
    tr.validate()?;
    te.validate()?;
    Ok((tr, te))
}

// ---- batching ----

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: (usize, usize, usize),
    pub size: usize,
}

/// One-epoch batch source. Order and augmentation are pure functions of
/// (seed, epoch, sample index), so clones replay identically and prefetched
/// epochs match direct iteration bit for bit.
#[derive(Clone)]
pub struct BatchIterator {
    data: Arc<Dataset>,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub augment: bool,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_4743;

impl BatchIterator {
    pub fn new(data: Arc<Dataset>, batch_size: usize, seed: u64, shuffle: bool, augment: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if data.is_empty() {
            return Err(Error::Contract("dataset is empty".into()));
        }
        let mut it = BatchIterator { data, batch_size, seed, shuffle, augment, epoch: 0, order: Vec::new(), pos: 0 };
        it.start_epoch(0);
        Ok(it)
    }

    /// Reset to the beginning of `epoch` with that epoch's ordering.
    pub fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.pos = 0;
        self.order = if self.shuffle {
            rng::permutation(self.data.len(), self.seed, &[SHUFFLE_STREAM, epoch])
        } else {
            (0..self.data.len()).collect()
        };
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size)
    }

    /// Next batch of this epoch; `None` signals the end of the epoch.
    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        let n = self.data.image_numel();
        let (c, h, w) = self.data.shape;
        let mut images = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let img = self.data.image(i);
            if self.augment {
                augment_into(img, c, h, w, self.seed, self.epoch, i as u64, &mut images);
            } else {
                images.extend_from_slice(img);
            }
            labels.push(self.data.labels[i] as usize);
        }
        self.pos = end;
        Some(Batch { images, labels, shape: self.data.shape, size: idx.len() })
    }
}

/// Pad-4 random crop plus horizontal flip, keyed per (epoch, sample).
#[allow(clippy::too_many_arguments)]
fn augment_into(img: &[f32], c: usize, h: usize, w: usize, seed: u64, epoch: u64, index: u64, out: &mut Vec<f32>) {
    const PAD: isize = 4;
    let span = 2 * PAD as u64 + 1;
    let dy = (rng::key(seed, &[AUGMENT_STREAM, epoch, index, 0]) % span) as isize - PAD;
    let dx = (rng::key(seed, &[AUGMENT_STREAM, epoch, index, 1]) % span) as isize - PAD;
    let flip = rng::bernoulli(0.5, seed, &[AUGMENT_STREAM, epoch, index, 2]);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let sx = if flip { w as isize - 1 - x } else { x };
                let (py, px) = (y + dy, sx + dx);
                let v = if py >= 0 && py < h as isize && px >= 0 && px < w as isize {
                    plane[(py * w as isize + px) as usize]
                } else {
                    0.0
                };
                out.push(v);
            }
        }
    }
}

/// Iterate one epoch, optionally preparing batches on a background thread
/// behind a bounded queue of depth 2.
pub fn stream_epoch(it: &BatchIterator, epoch: u64, prefetch: bool) -> Box<dyn Iterator<Item = Batch> + Send> {
    let mut worker = it.clone();
    worker.start_epoch(epoch);
    if !prefetch {
        return Box::new(std::iter::from_fn(move || worker.next_batch()));
    }
    let (tx, rx) = mpsc::sync_channel::<Batch>(2);
    std::thread::spawn(move || {
        while let Some(b) = worker.next_batch() {
            if tx.send(b).is_err() {
                break;
            }
        }
    });
    Box::new(rx.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize, classes: usize) -> Arc<Dataset> {
        Arc::new(synth_dataset(n, classes, 7).unwrap())
    }

    #[test]
    fn batch_sizes_split_with_remainder() {
        let it = BatchIterator::new(tiny_dataset(100, 10), 64, 1, false, false).unwrap();
        let mut it = it;
        let sizes: Vec<usize> = std::iter::from_fn(|| it.next_batch()).map(|b| b.size).collect();
        assert_eq!(sizes, vec![64, 36]);
    }

    #[test]
    fn unshuffled_batches_are_in_index_order() {
        let ds = tiny_dataset(20, 4);
        let mut it = BatchIterator::new(ds.clone(), 7, 1, false, false).unwrap();
        let b = it.next_batch().unwrap();
        let expect: Vec<usize> = (0..7).map(|i| ds.labels[i] as usize).collect();
        assert_eq!(b.labels, expect);
    }

    #[test]
    fn epoch_covers_every_index_exactly_once() {
        let mut it = BatchIterator::new(tiny_dataset(101, 10), 8, 3, true, false).unwrap();
        for epoch in 0..3u64 {
            it.start_epoch(epoch);
            let mut counts = vec![0usize; 101];
            for i in &it.order {
                counts[*i] += 1;
            }
            assert!(counts.iter().all(|&c| c == 1), "epoch {epoch} not a permutation");
        }
    }

    #[test]
    fn shuffling_differs_across_epochs_but_replays_across_runs() {
        let mut a = BatchIterator::new(tiny_dataset(64, 4), 16, 5, true, false).unwrap();
        let mut b = BatchIterator::new(tiny_dataset(64, 4), 16, 5, true, false).unwrap();
        a.start_epoch(0);
        b.start_epoch(0);
        assert_eq!(a.order, b.order);
        let epoch0 = a.order.clone();
        a.start_epoch(1);
        assert_ne!(a.order, epoch0);
    }

    #[test]
    fn prefetch_matches_direct_iteration() {
        let it = BatchIterator::new(tiny_dataset(50, 5), 8, 11, true, true).unwrap();
        let direct: Vec<Batch> = stream_epoch(&it, 2, false).collect();
        let threaded: Vec<Batch> = stream_epoch(&it, 2, true).collect();
        assert_eq!(direct.len(), threaded.len());
        for (d, t) in direct.iter().zip(&threaded) {
            assert_eq!(d.labels, t.labels);
            assert_eq!(d.images, t.images);
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_label() {
        let ds = tiny_dataset(10, 2);
        let mut plain = BatchIterator::new(ds.clone(), 10, 9, false, false).unwrap();
        let mut aug = BatchIterator::new(ds, 10, 9, false, true).unwrap();
        let a = plain.next_batch().unwrap();
        let b = aug.next_batch().unwrap();
        assert_eq!(a.images.len(), b.images.len());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.shape, b.shape);
    }
}
