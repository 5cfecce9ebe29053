//! Binary checkpoint: the magic `AJEPA1`, a manifest, then the payloads.
//!
//! ```text
//! "AJEPA1"
//! u32 count
//! count x { u32 name_len, name (utf-8), u32 rank, rank x u32 dim }
//! payloads in manifest order, little-endian f32
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::params::ParamStore;
use super::Scalar;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"AJEPA1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every array of `store` as `{prefix}.{name}`.
    pub fn push_store<F: Scalar>(&mut self, prefix: &str, store: &ParamStore<F>) {
        for p in store.iter() {
            self.arrays.push(NamedArray {
                name: format!("{prefix}.{}", p.name),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.f64() as f32).collect(),
            });
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.arrays.iter().any(|a| a.name.starts_with(&dotted))
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Overwrites every array of `store` from `{prefix}.{name}`; shapes must
    /// match exactly.
    pub fn load_store<F: Scalar>(&self, prefix: &str, store: &mut ParamStore<F>) -> Result<()> {
        for p in store.iter_mut() {
            let key = format!("{prefix}.{}", p.name);
            let a = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{key}`")))?;
            if a.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "array `{key}` has shape {:?}, model expects {:?}",
                    a.shape, p.shape
                )));
            }
            p.data.iter_mut().zip(&a.data).for_each(|(d, &v)| *d = F::of(f64::from(v)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = r.u32()?;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("array name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut arrays = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
