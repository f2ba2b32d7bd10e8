//! `UBW1` weight container.
//!
//! Layout (little-endian): magic `UBW1`, u32 version, u32 config length,
//! UTF-8 config text, u32 entry count, then per entry u16 name length, name,
//! u8 rank, u32 dims, and the raw `f32` data.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::arch::LayerSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"UBW1";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    /// Architecture description (JSON).
    pub config: String,
    pub tensors: BTreeMap<String, Arc<Tensor>>,
}

impl WeightStore {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::ShapeTableMismatch(format!("missing tensor `{name}`")))
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Checks that the store holds exactly the tensors `specs` call for.
    pub fn validate(&self, specs: &[LayerSpec]) -> Result<()> {
        let mut expected = BTreeMap::new();
        for s in specs {
            for (name, shape) in s.param_shapes() {
                expected.insert(name, shape);
            }
        }
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if &t.shape != shape {
                return Err(Error::ShapeTableMismatch(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::ShapeTableMismatch(format!("unknown tensor `{extra}`")));
        }
        Ok(())
    }
}

pub fn save_weights(store: &WeightStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.config.len() + 4 * store.total_len());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.config.len() as u32).to_le_bytes());
    out.extend_from_slice(store.config.as_bytes());
    out.extend_from_slice(&(store.tensors.len() as u32).to_le_bytes());
    for (name, t) in &store.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedFile(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a container. Sizes are checked against the remaining bytes before
/// anything is allocated.
pub fn load_weights(bytes: &[u8]) -> Result<WeightStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            expected: WEIGHTS_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let clen = r.u32("config length")? as usize;
    let config = std::str::from_utf8(r.take(clen, "config")?)
        .map_err(|_| Error::CorruptHeader("config is not UTF-8".into()))?
        .to_string();
    let count = r.u32("entry count")? as usize;
    let mut store = WeightStore::new(config);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::CorruptHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or(Error::TruncatedFile("tensor data"))?;
        let raw = r.take(4 * n, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if store.tensors.contains_key(&name) {
            return Err(Error::ShapeTableMismatch(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptHeader(format!("{} trailing bytes", r.remaining())));
    }
    Ok(store)
}
