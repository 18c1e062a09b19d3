//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "KATTNCKP"
//! version  u32
//! config   u32 length + UTF-8 TOML of the ModelConfig
//! dtype    u8 element width in bytes (4 = f32, 8 = f64)
//! count    u32 number of tensors
//! tensor*  u32 name length, name, u32 ndim, u64 per dim, elements
//! ```
//!
//! Tensors are stored in model order. Loading accepts either element width
//! and converts to the requested precision.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"KATTNCKP";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let config = toml::to_string(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.push(T::BYTES as u8);
    let entries = model.params().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in e.value.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

fn read_elements<T: Real, S: Real>(r: &mut Reader<'_>, n: usize) -> Result<Vec<T>> {
    let raw = r.take(n.checked_mul(S::BYTES).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
    Ok(raw.chunks_exact(S::BYTES).map(|c| T::of(S::read_le(c).f64())).collect())
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config: ModelConfig =
        toml::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let dtype = r.take(1)?[0] as usize;
    if dtype != 4 && dtype != 8 {
        return Err(Error::Checkpoint(format!("unknown element width {dtype}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let data = if dtype == 4 {
            read_elements::<T, f32>(&mut r, n)?
        } else {
            read_elements::<T, f64>(&mut r, n)?
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Model::from_parts(config, entries)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
