//! Named-array container for model parameters and memory banks.
//!
//! Layout (little endian):
//! `magic[8] version:u32 config_hash[32] count:u32` then per array
//! `name_len:u32 name ndim:u32 dims:u64*ndim values:f64*prod(dims)`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamStore;
use crate::numerics::DiffArray;

pub const MAGIC: &[u8; 8] = b"AFFORDX\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed entry at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("config hash mismatch: file {found}, expected {expected} (use --force to override)")]
    HashMismatch { expected: String, found: String },
    #[error("duplicate array name `{0}`")]
    Duplicate(String),
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub arrays: Vec<(String, DiffArray)>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Self {
            config_hash,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DiffArray) {
        self.arrays.push((name.into(), value));
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (n, v) in store.iter() {
            let mut v = v.clone();
            v.clear_grad();
            self.arrays.push((format!("{prefix}{n}"), v));
        }
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Parameters whose names start with `prefix`, with the prefix removed.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut ps = ParamStore::new();
        for (n, v) in &self.arrays {
            if let Some(rest) = n.strip_prefix(prefix) {
                ps.insert(rest, v.clone());
            }
        }
        ps
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            if !seen.insert(name.as_str()) {
                return Err(CheckpointError::Duplicate(name.clone()));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(arr.shape().len() as u32).to_le_bytes());
            for &d in arr.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in arr.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let count = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed {
                    offset: at,
                    reason: "name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Malformed {
                offset: at,
                reason: "shape overflows".into(),
            })?;
            let need = n.checked_mul(8).ok_or(CheckpointError::Malformed {
                offset: at,
                reason: "shape overflows".into(),
            })?;
            let raw = r.take(need)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let arr = DiffArray::new(shape, values).map_err(|e| CheckpointError::Malformed {
                offset: at,
                reason: e.to_string(),
            })?;
            if arrays.iter().any(|(m, _): &(String, DiffArray)| *m == name) {
                return Err(CheckpointError::Duplicate(name));
            }
            arrays.push((name, arr));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok(Self { config_hash, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode()?).map_err(|e| io_err(path, e))
    }

    /// Reads a checkpoint; with `expected` set, a different stored config
    /// hash is refused unless `force`.
    pub fn load(path: &Path, expected: Option<&[u8; 32]>, force: bool) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let ck = Self::decode(&bytes)?;
        if let Some(h) = expected {
            if *h != ck.config_hash && !force {
                return Err(CheckpointError::HashMismatch {
                    expected: hex(h),
                    found: hex(&ck.config_hash),
                });
            }
        }
        Ok(ck)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new([7; 32]);
        c.push("a.weight", DiffArray::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap());
        c.push("s", DiffArray::scalar(std::f64::consts::PI));
        c.push("empty", DiffArray::zeros(vec![0, 4]));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let d = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(d.config_hash, c.config_hash);
        for ((n1, a1), (n2, a2)) in c.arrays.iter().zip(&d.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(a1.shape(), a2.shape());
            let b1: Vec<u64> = a1.values().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = a2.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().encode().unwrap();
        for cut in [3, 20, 50, bytes.len() - 1] {
            match Checkpoint::decode(&bytes[..cut]) {
                Err(CheckpointError::Truncated { offset, .. }) => assert_eq!(offset, cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn hash_mismatch_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        assert!(matches!(
            Checkpoint::load(&p, Some(&[8; 32]), false),
            Err(CheckpointError::HashMismatch { .. })
        ));
        assert!(Checkpoint::load(&p, Some(&[8; 32]), true).is_ok());
        assert!(Checkpoint::load(&p, Some(&[7; 32]), false).is_ok());
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        assert_eq!(Checkpoint::decode(b"NOTACKPTxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx"), Err(CheckpointError::BadMagic));
        let mut c = Checkpoint::new([0; 32]);
        c.push("x", DiffArray::scalar(1.0));
        c.push("x", DiffArray::scalar(2.0));
        assert_eq!(c.encode(), Err(CheckpointError::Duplicate("x".into())));
    }
}
