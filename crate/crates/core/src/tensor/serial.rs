//! `SCT1` binary tensor files: magic, u8 dtype, u8 rank, u32 dims, raw little-endian data.

use std::fs;
use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCT1";

pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision; exact when the dtype already matches.
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Dimension(format!("rank {} too large to serialize", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Dimension(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes_into(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let bad = |m: &str| Error::Data(format!("malformed tensor file: {m}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing SCT1 magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let n: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != n * dtype.size() {
        return Err(bad("payload length does not match shape"));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_vec(
            &shape,
            body.chunks_exact(4).map(f32::from_le_slice).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::from_vec(
            &shape,
            body.chunks_exact(8).map(f64::from_le_slice).collect(),
        )?),
    })
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_tensor_any(path)?.into_real())
}
