//! Little-endian binary tensor encoding shared by dataset files (`TNSR`) and
//! model checkpoints.
//!
//! Tensor block: `ndim: u32`, `dims: ndim × u64`, `values: f64 × Πdims`.
//! A `.tns` file is `b"TNSR"`, `version: u32`, then one tensor block.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_tensor_block(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.shape().len() as u32)?;
    for d in t.shape() {
        write_u64(w, *d as u64)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_block(r: &mut impl Read) -> Result<Tensor> {
    let ndim = read_u32(r)? as usize;
    if ndim > 4 {
        return Err(Error::Parse(format!("tensor with {ndim} axes")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn encode_tensor_file(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.shape().len() * 8 + t.len() * 8);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    write_tensor_block(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn decode_tensor_file(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Parse("truncated tensor file".into()))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Parse("bad tensor magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != TENSOR_VERSION {
        return Err(Error::Parse(format!("unsupported tensor version {version}")));
    }
    let t = read_tensor_block(&mut r).map_err(|e| match e {
        Error::Io(_) => Error::Parse("truncated tensor file".into()),
        other => other,
    })?;
    if !r.is_empty() {
        return Err(Error::Parse("trailing bytes after tensor".into()));
    }
    Ok(t)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor_file(t))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    decode_tensor_file(&std::fs::read(path)?)
}
