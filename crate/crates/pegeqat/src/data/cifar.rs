//! CIFAR-10 binary format: 3073-byte records (1 label byte, then 3 channel
//! planes of 1024 bytes each), 10,000 records per distribution file.

use super::{normalize_pair, Dataset, RawSet};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const RECORD: usize = 3073;
const PIXELS: usize = 3072;

pub(crate) fn parse_records(bytes: &[u8], file: &str) -> Result<(Vec<f32>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Format(format!(
            "{file}: length {} is not a positive multiple of {RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format(format!("{file}: label byte {label} > 9")));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

fn load_split(dir: &Path, files: &[String]) -> Result<RawSet> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let (im, lb) = parse_records(&bytes, name)?;
        images.extend(im);
        labels.extend(lb);
    }
    Ok(RawSet { images, labels, shape: (3, 32, 32) })
}

/// Load the train split (data_batch_1..5.bin) and test split (test_batch.bin).
/// `train_subset` keeps only the first n training records; normalization
/// statistics are computed on what is actually trained on.
pub fn load_cifar10_bin(dir: &Path, train_subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let mut train = load_split(dir, &train_files)?;
    if let Some(n) = train_subset {
        if n < train.labels.len() {
            train.labels.truncate(n);
            train.images.truncate(n * PIXELS);
        }
    }
    let test = load_split(dir, &["test_batch.bin".to_string()])?;
    normalize_pair("cifar10", 10, train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_offsets() {
        // one record: label 6, pixel k at offset 1 + k
        let mut rec = vec![0u8; RECORD];
        rec[0] = 6;
        rec[1] = 255; // first red pixel
        rec[1 + 1024] = 128; // first green pixel
        let (im, lb) = parse_records(&rec, "t").unwrap();
        assert_eq!(lb, vec![6]);
        assert_eq!(im[0], 1.0);
        assert_eq!(im[1024], 128.0 / 255.0);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = vec![0u8; RECORD * 2 - 1];
        assert!(matches!(parse_records(&bytes, "t"), Err(Error::Format(_))));
    }

    #[test]
    fn label_byte_out_of_range_is_a_format_error() {
        let mut rec = vec![0u8; RECORD];
        rec[0] = 10;
        assert!(matches!(parse_records(&rec, "t"), Err(Error::Format(_))));
    }
}
