//! Versioned binary checkpoints: 8-byte magic "PEGEQAT1", a u32 version, the
//! step counter and RNG seed, a length-prefixed UTF-8 descriptor (the
//! canonical config text), then named little-endian f32 arrays.
//! save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"PEGEQAT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub descriptor: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        out.extend((self.descriptor.len() as u64).to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend((a.name.len() as u64).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend((a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let dlen = r.u64()? as usize;
        let descriptor = String::from_utf8(r.take(dlen)?.to_vec())
            .map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u64()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { step, seed, descriptor, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            step: 42,
            seed: 7,
            descriptor: "model.arch = mlp\n".into(),
            arrays: vec![
                NamedArray { name: "param.fc1.w".into(), shape: vec![2, 3], data: vec![1.0, -0.5, 0.25, 0.0, 3.5, -2.0] },
                NamedArray { name: "state.step".into(), shape: vec![1], data: vec![42.0] },
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let a = ck.encode();
        let ck2 = Checkpoint::decode(&a).unwrap();
        let b = ck2.encode();
        assert_eq!(a, b);
        assert_eq!(ck, ck2);
    }

    #[test]
    fn flipped_magic_byte_is_a_format_error() {
        let mut bytes = sample().encode();
        bytes[3] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().encode();
        for cut in [5usize, 20, bytes.len() - 3] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn trailing_garbage_is_a_format_error() {
        let mut bytes = sample().encode();
        bytes.push(0);
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let mut bytes = sample().encode();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
    }
}
