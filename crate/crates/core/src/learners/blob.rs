//! Portable parameter blobs.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic   b"NECP"
//! version u32 (= 1)
//! count   u32                      number of tensors
//! repeat count times:
//!   name_len u32, name (UTF-8)     "layer<i>.weight" or "layer<i>.bias"
//!   ndim u32, dims u64 * ndim
//!   data f64 * prod(dims)          row-major
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use super::network::Dense;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"NECP";
const VERSION: u32 = 1;

pub fn write_layers<W: Write>(layers: &[Dense], mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&((layers.len() * 2) as u32).to_le_bytes());
    for (i, layer) in layers.iter().enumerate() {
        let (rows, cols) = layer.weight.dim();
        put_tensor(&mut buf, &format!("layer{i}.weight"), &[rows, cols], layer.weight.iter());
        put_tensor(&mut buf, &format!("layer{i}.bias"), &[cols], layer.bias.iter());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn put_tensor<'a>(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = &'a f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("parameter blob truncated at byte {}", self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| blob_err("tensor too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn blob_err(message: impl Into<String>) -> Error {
    Error::Parse { line: 0, message: message.into() }
}

pub fn read_layers<R: Read>(mut r: R) -> Result<Vec<Dense>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(blob_err("not a parameter blob (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(blob_err(format!("unsupported blob version {version}")));
    }
    let count = c.u32()? as usize;
    if count % 2 != 0 {
        return Err(blob_err("tensor count must pair weights with biases"));
    }
    let mut layers = Vec::with_capacity(count / 2);
    for i in 0..count / 2 {
        let (wdims, wdata) = read_tensor(&mut c, &format!("layer{i}.weight"))?;
        let (bdims, bdata) = read_tensor(&mut c, &format!("layer{i}.bias"))?;
        if wdims.len() != 2 || bdims.len() != 1 || bdims[0] != wdims[1] {
            return Err(blob_err(format!("layer {i} has inconsistent shapes {wdims:?} / {bdims:?}")));
        }
        let weight = Array2::from_shape_vec((wdims[0], wdims[1]), wdata).map_err(|e| blob_err(e.to_string()))?;
        layers.push(Dense { weight, bias: Array1::from(bdata) });
    }
    if c.pos != bytes.len() {
        return Err(blob_err("trailing bytes after last tensor"));
    }
    Ok(layers)
}

fn read_tensor(c: &mut Cursor<'_>, expected: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let len = c.u32()? as usize;
    let name = std::str::from_utf8(c.take(len)?).map_err(|_| blob_err("tensor name is not UTF-8"))?;
    if name != expected {
        return Err(blob_err(format!("expected tensor {expected}, found {name}")));
    }
    let ndim = c.u32()? as usize;
    let dims = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| blob_err("tensor too large"))?;
    Ok((dims, c.f64s(n)?))
}
