//! NTNSR tensor files.
//!
//! Layout: the 5 magic bytes `NTSR1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the values row-major as little-endian
//! IEEE-754 `f32`. A 64-bit sibling with magic `NTSD1` and `f64` values is
//! used where bit-exact round trips of training state are required.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC_F32: &[u8; 5] = b"NTSR1";
pub const MAGIC_F64: &[u8; 5] = b"NTSD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn encode(t: &Tensor, precision: Precision) -> Vec<u8> {
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + width * t.numel());
    out.extend_from_slice(match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    });
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Parse either precision; `origin` names the source in errors.
pub fn decode(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let fail = |detail: String| Error::Format { path: origin.to_string(), detail };
    if bytes.len() < 9 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    let width = match &bytes[..5] {
        m if m == MAGIC_F32 => 4,
        m if m == MAGIC_F64 => 8,
        m => return Err(fail(format!("bad magic {:?}", String::from_utf8_lossy(m)))),
    };
    let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dims_end = 9 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail(format!("truncated dims: rank {} needs {} header bytes", rank, dims_end)));
    }
    let shape: Vec<usize> = bytes[9..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| fail("dims overflow".into()))?;
    let payload = &bytes[dims_end..];
    if payload.len() != numel * width {
        return Err(fail(format!(
            "shape {:?} needs {} payload bytes, found {}",
            shape,
            numel * width,
            payload.len()
        )));
    }
    let data: Vec<f64> = if width == 4 {
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    } else {
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    Tensor::new(&shape, data)
}

pub fn write(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    fs::write(path, encode(t, precision)).map_err(|e| io_err(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes, &path.display().to_string())
}
