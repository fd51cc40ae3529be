//! Model checkpoints.
//!
//! Layout, little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `RDLC` | 4 bytes |
//! | version | u8 |
//! | config length | u32 |
//! | config (TOML) | UTF-8 |
//! | tensor count | u32 |
//!
//! then per tensor: name length (u16), name (UTF-8), rank (u8), dims
//! (u32 each), values (f64 each).

use std::path::Path;

use crate::autograd::Tensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::unfolding::ModelState;

pub const MAGIC: &[u8; 4] = b"RDLC";
pub const VERSION: u8 = 1;

pub fn encode(model: &ModelState) -> Vec<u8> {
    let cfg = model.config.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Format(format!("checkpoint text: {e}")))
    }
}

/// Rebuilds the model from its config, then fills every parameter.
pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config = ModelConfig::from_toml(r.text(cfg_len)?)?;
    let mut model = ModelState::new(&config)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, config implies {}", model.store.len())));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.text(name_len)?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let id = model.store.id(&name).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if model.store.value(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!("parameter {name}: shape {shape:?}, expected {:?}", model.store.value(id).shape())));
        }
        *model.store.value_mut(id) = Tensor::new(shape, data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    decode(&std::fs::read(path)?)
}
