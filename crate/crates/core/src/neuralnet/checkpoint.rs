//! `VDDW` parameter files: magic, `u16` version, `u32` tensor count, then per
//! tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` extents and an
//! `f32` payload. All integers and floats are little-endian.

use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::{NnError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VDDW";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type NamedTensor = (String, Tensor<f32>);

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
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
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| NnError::Checkpoint(format!("{name}: extent overflow")))?;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| NnError::Checkpoint("size overflow".into()))?)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Every stored tensor of `store` followed by `extra`.
pub fn store_tensors(store: &ParamStore<f32>, extra: &[NamedTensor]) -> Vec<NamedTensor> {
    store.iter().map(|p| (p.name.clone(), p.value.clone())).chain(extra.iter().cloned()).collect()
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors)).map_err(|e| NnError::Io(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| NnError::Io(e.to_string()))?;
    decode_checkpoint(&bytes)
}
