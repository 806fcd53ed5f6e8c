//! `TGVM` tensor checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    "TGVM"                 4 bytes
//! version  u32                    currently 1
//! repeated until end of file:
//!   name_len u32, name (utf-8, name_len bytes)
//!   ndim u32, dims u32 * ndim
//!   payload f32 * product(dims)
//! ```
//!
//! Tensors are written in name order, so equal maps give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TGVM";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(Error::Parameter("checkpoint tensor names must be non-empty".into()));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Parameter(format!("{name}: dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing TGVM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported version {version}")));
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let mut out = BTreeMap::new();
    while r.pos < bytes.len() {
        let index = out.len();
        let name_len = r
            .u32()
            .ok_or_else(|| Error::Corrupt(format!("truncated name length of tensor #{index}")))?;
        let name = r
            .take(name_len as usize)
            .ok_or_else(|| Error::Corrupt(format!("truncated name of tensor #{index}")))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::Corrupt(format!("tensor #{index} has a non-utf8 name")))?;
        if name.is_empty() {
            return Err(Error::Corrupt(format!("tensor #{index} has an empty name")));
        }
        let ndim = r
            .u32()
            .ok_or_else(|| Error::Corrupt(format!("tensor {name}: truncated rank")))?;
        let mut shape = Vec::with_capacity(ndim.min(16) as usize);
        for _ in 0..ndim {
            let d = r
                .u32()
                .ok_or_else(|| Error::Corrupt(format!("tensor {name}: truncated dims")))?;
            shape.push(d as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name}: shape overflows")))?;
        let payload = numel
            .checked_mul(4)
            .and_then(|n| r.take(n))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name}: truncated payload")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if out.contains_key(&name) {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::write(path, save_checkpoint(tensors)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    load_checkpoint(&std::fs::read(path)?)
}
