//! BT2 tensor files: magic `BT2\0`, u8 dtype code, u8 rank, little-endian
//! u32 dims, then the row-major payload in little-endian scalar order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{Shape4, Tensor};

pub const MAGIC: &[u8; 4] = b"BT2\0";
const RANK: u8 = 4;

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let shape = t.shape();
    let mut buf = Vec::with_capacity(4 + 2 + 16 + t.numel() * S::DTYPE.size_of());
    buf.extend_from_slice(MAGIC);
    buf.push(S::DTYPE as u8);
    buf.push(RANK);
    for dim in [shape.n, shape.c, shape.h, shape.w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    buf
}

fn decode_header(bytes: &[u8]) -> Result<(Dtype, Shape4, usize)> {
    let fail = |what: &str| Error::Format(format!("invalid BT2 data: {what}"));
    if bytes.len() < 6 {
        return Err(fail("shorter than the fixed header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let dtype = Dtype::from_code(bytes[4])
        .ok_or_else(|| fail(&format!("unknown dtype code {}", bytes[4])))?;
    if bytes[5] != RANK {
        return Err(fail(&format!("expected rank {RANK}, got {}", bytes[5])));
    }
    let dims_end = 6 + RANK as usize * 4;
    if bytes.len() < dims_end {
        return Err(fail("truncated dims"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + i * 4;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    Ok((dtype, shape, dims_end))
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (dtype, shape, payload_at) = decode_header(bytes)?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, requested {:?}",
            S::DTYPE
        )));
    }
    let want = shape
        .numel()
        .checked_mul(dtype.size_of())
        .ok_or_else(|| Error::Format("invalid BT2 data: dims overflow".into()))?;
    let payload = &bytes[payload_at..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "invalid BT2 data: payload is {} bytes, dims imply {want}",
            payload.len()
        )));
    }
    let step = dtype.size_of();
    let data: Vec<S> = payload.chunks_exact(step).map(S::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Loads any BT2 file, widening f32 payloads to f64 losslessly.
pub fn decode_tensor_f64(bytes: &[u8]) -> Result<(Dtype, Tensor<f64>)> {
    let (dtype, _, _) = decode_header(bytes)?;
    let t = match dtype {
        Dtype::F32 => decode_tensor::<f32>(bytes)?.cast::<f64>(),
        Dtype::F64 => decode_tensor::<f64>(bytes)?,
    };
    Ok((dtype, t))
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| with_path(path, e))
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| with_path(path, e))?;
    decode_tensor(&bytes)
}

pub fn read_tensor_f64(path: &Path) -> Result<(Dtype, Tensor<f64>)> {
    let bytes = fs::read(path).map_err(|e| with_path(path, e))?;
    decode_tensor_f64(&bytes)
}
