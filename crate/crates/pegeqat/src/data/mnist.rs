//! MNIST IDX format: big-endian headers, magic 0x00000803 for images
//! (dims N x 28 x 28) and 0x00000801 for labels (dim N).

use super::{normalize_pair, Dataset, RawSet};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize, file: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{file}: truncated header")))
}

pub(crate) fn parse_images(bytes: &[u8], file: &str) -> Result<(Vec<f32>, usize, usize, usize)> {
    let magic = read_u32_be(bytes, 0, file)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("{file}: bad image magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4, file)? as usize;
    let rows = read_u32_be(bytes, 8, file)? as usize;
    let cols = read_u32_be(bytes, 12, file)? as usize;
    let expect = 16 + n * rows * cols;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{file}: {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    let images = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((images, n, rows, cols))
}

pub(crate) fn parse_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, file)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("{file}: bad label magic {magic:#010x}")));
    }
    let n = read_u32_be(bytes, 4, file)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "{file}: {} bytes, header implies {}",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..].to_vec())
}

fn load_split(dir: &Path, images_file: &str, labels_file: &str) -> Result<RawSet> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
    };
    let (images, n, rows, cols) = parse_images(&read(images_file)?, images_file)?;
    let labels = parse_labels(&read(labels_file)?, labels_file)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{images_file} has {n} images but {labels_file} has {} labels",
            labels.len()
        )));
    }
    Ok(RawSet { images, labels, shape: (1, rows, cols) })
}

/// Load train (train-images-idx3-ubyte / train-labels-idx1-ubyte) and test
/// (t10k-*) splits of an uncompressed IDX directory.
pub fn load_mnist_idx(dir: &Path, train_subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    let mut train = load_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    if let Some(n) = train_subset {
        if n < train.labels.len() {
            let numel = train.shape.0 * train.shape.1 * train.shape.2;
            train.labels.truncate(n);
            train.images.truncate(n * numel);
        }
    }
    let test = load_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    normalize_pair("mnist", 10, train, test)
}

#[cfg(test)]
pub(crate) fn encode_images(images: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend(IMAGE_MAGIC.to_be_bytes());
    out.extend((n as u32).to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    out.extend_from_slice(images);
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABEL_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip() {
        let img = encode_images(&[0u8; 2 * 28 * 28], 2, 28, 28);
        let (data, n, r, c) = parse_images(&img, "t").unwrap();
        assert_eq!((n, r, c), (2, 28, 28));
        assert_eq!(data.len(), 2 * 784);
    }

    #[test]
    fn wrong_magic_in_label_file() {
        // an image magic where a label magic belongs
        let mut bytes = encode_labels(&[1, 2, 3]);
        bytes[..4].copy_from_slice(&IMAGE_MAGIC.to_be_bytes());
        assert!(matches!(parse_labels(&bytes, "t"), Err(Error::Format(_))));
    }

    #[test]
    fn all_zero_images_normalize_to_a_constant() {
        let dir = tempfile::tempdir().unwrap();
        let n = 8;
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), encode_images(&vec![0u8; n * 784], n, 28, 28)).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), encode_labels(&vec![0u8; n])).unwrap();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), encode_images(&vec![0u8; 784], 1, 28, 28)).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), encode_labels(&[0u8])).unwrap();
        let (train, _) = load_mnist_idx(dir.path(), None).unwrap();
        let first = train.images[0];
        assert!(train.images.iter().all(|&v| v == first));
    }

    #[test]
    fn image_label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), encode_images(&vec![0u8; 2 * 784], 2, 28, 28)).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), encode_labels(&[0u8; 3])).unwrap();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), encode_images(&vec![0u8; 784], 1, 28, 28)).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), encode_labels(&[0u8])).unwrap();
        assert!(matches!(load_mnist_idx(dir.path(), None), Err(Error::Format(_))));
    }
}
