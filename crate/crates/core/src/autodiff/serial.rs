//! Binary weight container.
//!
//! Layout (little endian): magic `FDWT`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` dims,
//! `f64` data. Tensors are written in name order, so equal maps encode to
//! equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{AutodiffError, Tensor};

const MAGIC: &[u8; 4] = b"FDWT";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn weights_to_bytes(weights: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        if self.pos + n > self.buf.len() {
            return Err(AutodiffError::Format("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(AutodiffError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(AutodiffError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| AutodiffError::Format(e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Format("trailing bytes".into()));
    }
    Ok(out)
}

pub fn write_weights(
    path: &Path,
    weights: &BTreeMap<String, Tensor>,
) -> Result<(), AutodiffError> {
    std::fs::write(path, weights_to_bytes(weights))?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
    weights_from_bytes(&std::fs::read(path)?)
}
