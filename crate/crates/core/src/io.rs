//! Tensor fixture files.
//!
//! Small fixtures are JSON objects `{"shape": [...], "data": [...]}`. Larger
//! ones use a flat binary layout:
//!
//! ```text
//! magic   8 bytes  b"DSSATNS1"
//! rank    u32 LE
//! dims    rank x u32 LE
//! data    product(dims) x f32 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"DSSATNS1";

pub fn tensor_to_json(t: &Tensor) -> Result<String> {
    Ok(serde_json::to_string(t)?)
}

pub fn tensor_from_json(s: &str) -> Result<Tensor> {
    let t: Tensor = serde_json::from_str(s)?;
    if !t.is_finite() {
        return Err(Error::Format("tensor contains non-finite values".into()));
    }
    Ok(t)
}

pub fn encode_tensor_binary(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * (1 + t.shape().len() + t.len()));
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated input: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_tensor_binary(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(Error::Format("tensor contains non-finite values".into()));
        }
        data.push(v as f64);
    }
    r.finish()?;
    Tensor::new(shape, data)
}

/// Reads a tensor, picking the format from the file's leading bytes.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(TENSOR_MAGIC) {
        decode_tensor_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        tensor_from_json(text)
    }
}

/// Writes a tensor; `.bin` files get the binary layout, everything else JSON.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        fs::write(path, encode_tensor_binary(t))?;
    } else {
        fs::write(path, tensor_to_json(t)?)?;
    }
    Ok(())
}
