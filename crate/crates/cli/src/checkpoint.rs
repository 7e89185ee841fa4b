//! Binary checkpoint of named `f64` tensors.
//!
//! Layout (all integers little-endian): `b"M2RN"`, version `u32`, tensor count
//! `u32`, then per tensor: name length `u16`, UTF-8 name, rank `u8`, one `u32`
//! per dimension, and the row-major payload as `f64`.

use std::path::Path;

use m2rnn_core::{ParamSet, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"M2RN";
pub const VERSION: u32 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor<f64>)>, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("wrong magic bytes".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(out)
}

pub fn save<P: ParamSet<f64>>(path: &Path, params: &P) -> Result<()> {
    let named = params.named();
    let bytes = encode(named.iter().map(|(n, t)| (n.as_str(), *t)));
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Overwrites every tensor of `params` with the checkpoint's; names and shapes
/// must match exactly.
pub fn load_into<P: ParamSet<f64>>(path: &Path, params: &mut P) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let stored = decode(&bytes).map_err(bad)?;
    let mut slots = params.named_mut();
    if stored.len() != slots.len() {
        return Err(bad(format!("{} tensors, model has {}", stored.len(), slots.len())));
    }
    for ((name, t), (want, slot)) in stored.into_iter().zip(slots.iter_mut()) {
        if name != *want || t.shape() != slot.shape() {
            return Err(bad(format!(
                "{name} {:?} where the model has {want} {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    Ok(())
}
