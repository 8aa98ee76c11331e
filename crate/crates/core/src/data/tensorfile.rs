//! `MCPP` tensor container: a tiny little-endian format holding one `f64` tensor.
//!
//! Layout: `b"MCPP"`, `version: u32`, `ndim: u32`, `dims: ndim × u64`, then
//! `∏dims` IEEE-754 doubles, all little-endian, row-major.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCPP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = element_count(&dims)?;
        if n != values.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![],
            values: vec![v],
        }
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))
    })
}

pub fn encode(dims: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    let n = element_count(dims)?;
    if n != values.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} hold {n} values, got {}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode a container; `what` names the source in error messages.
pub fn decode(bytes: &[u8], what: &Path) -> Result<Tensor> {
    let fail = |m: String| Error::format(what, m);
    if bytes.len() < 12 {
        return Err(fail("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected \"MCPP\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12usize
        .checked_add(
            ndim.checked_mul(8)
                .ok_or_else(|| fail("dims overflow".into()))?,
        )
        .ok_or_else(|| fail("dims overflow".into()))?;
    if bytes.len() < header {
        return Err(fail("truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 12 + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| fail("dims overflow".into()))?);
    }
    let n = element_count(&dims).map_err(|_| fail(format!("dims {dims:?} overflow")))?;
    let expected = n
        .checked_mul(8)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| fail(format!("dims {dims:?} overflow")))?;
    if bytes.len() < expected {
        return Err(fail(format!(
            "truncated payload: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(fail(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let values = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, values })
}

pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(dims, values)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
