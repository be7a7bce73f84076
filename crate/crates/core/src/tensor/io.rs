//! AXTF tensor files.
//!
//! Layout, all little-endian, no padding:
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 4     | magic `AXTF`                   |
//! | 2     | version (`u16`, currently 1)   |
//! | 1     | dtype (`0` = f32, `1` = f64)   |
//! | 1     | rank (always 4)                |
//! | 16    | extents `n, h, w, c` as `u32`  |
//! | ...   | values in `(n, h, w, c)` order |

use std::fs;
use std::path::Path;

use super::{DType, Element, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AXTF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 16;

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.push(4);
    for e in t.shape().0 {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Header fields of an encoded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Shape,
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: &str| Err(Error::Format(m.to_string()));
    if bytes.len() < HEADER_LEN {
        return bad("truncated header");
    }
    if &bytes[0..4] != MAGIC {
        return bad("bad magic");
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let Some(dtype) = DType::from_tag(bytes[6]) else {
        return Err(Error::Format(format!("unknown dtype tag {}", bytes[6])));
    };
    if bytes[7] != 4 {
        return Err(Error::Format(format!("rank {} (expected 4)", bytes[7])));
    }
    let mut ext = [0usize; 4];
    for (i, e) in ext.iter_mut().enumerate() {
        let o = 8 + 4 * i;
        *e = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape(ext);
    if shape.validate().is_err() {
        return bad("zero extent");
    }
    let expected = HEADER_LEN + shape.numel() * dtype.size();
    if bytes.len() != expected {
        return Err(Error::Format(format!("payload is {} bytes, header implies {expected}", bytes.len())));
    }
    Ok(Header { dtype, shape })
}

/// Decodes a tensor stored with exactly the dtype `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!("file holds {}, requested {}", header.dtype, T::DTYPE)));
    }
    let size = T::DTYPE.size();
    let data = bytes[HEADER_LEN..].chunks(size).map(T::read_le).collect();
    Tensor::from_vec(header.shape, data)
}

/// Decodes a tensor of either dtype and converts it to `T`.
pub fn decode_as<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    match read_header(bytes)?.dtype {
        DType::F32 => decode::<f32>(bytes).map(|t| t.cast()),
        DType::F64 => decode::<f64>(bytes).map(|t| t.cast()),
    }
}

pub fn save<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_as(&fs::read(path)?)
}
