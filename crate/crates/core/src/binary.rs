//! Little-endian binary conventions shared by checkpoints, classifier exports
//! and dataset payloads.
//!
//! A tensor record is `ndim: u32`, then `ndim` dimensions as `u32`, then the
//! values as little-endian IEEE-754 of the file's scalar width.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_usize<W: Write>(w: &mut W, v: usize, field: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{field} = {v} exceeds u32")))?;
    write_u32(w, v)
}

pub fn write_scalar<T: Scalar, W: Write>(w: &mut W, v: T) -> Result<()> {
    let mut buf = Vec::with_capacity(T::BYTES);
    v.write_le(&mut buf);
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_scalar<T: Scalar, R: Read>(r: &mut R) -> Result<T> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf[..T::BYTES])?;
    Ok(T::read_le(&buf[..T::BYTES]))
}

pub fn check_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// Encoded size of a tensor record in bytes.
pub fn tensor_record_len<T: Scalar>(t: &Tensor<T>) -> usize {
    4 + 4 * t.shape().len() + T::BYTES * t.len()
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    write_usize(w, t.shape().len(), "ndim")?;
    for &d in t.shape() {
        write_usize(w, d, "dimension")?;
    }
    let mut buf = Vec::with_capacity(T::BYTES * t.len());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let ndim = read_u32(r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Format(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * T::BYTES];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}
