//! Single-tensor binary container used for dataset images, masks and
//! checkpoint parameters.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! offset 0  magic   b"TNSR"
//! offset 4  version u16     (currently 1)
//! offset 6  dtype   u8      (0 = f64, 1 = u8)
//! offset 7  ndim    u8      (at most 8)
//! offset 8  dims    ndim x u64
//! then      payload row-major, dims product elements
//! ```
//!
//! Decoding is hardened against untrusted input: dimension products are
//! checked with overflow-safe arithmetic against the actual payload length.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_NDIM: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum TensorFileError {
    #[error("file too short: {0} bytes")]
    TooShort(usize),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("ndim {0} exceeds the maximum of {MAX_NDIM}")]
    TooManyDims(u8),
    #[error("dimension product overflows")]
    Overflow,
    #[error("payload has {got} bytes but the header implies {expected}")]
    PayloadSizeMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F64(_) => None,
        }
    }
}

fn encode_header(dtype: u8, shape: &[usize], payload_len: usize) -> Vec<u8> {
    assert!(shape.len() <= MAX_NDIM, "at most {MAX_NDIM} dimensions");
    let mut out = Vec::with_capacity(8 + shape.len() * 8 + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

pub fn encode_f64(shape: &[usize], data: &[f64]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "shape must match data");
    let mut out = encode_header(0, shape, data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "shape must match data");
    let mut out = encode_header(1, shape, data.len());
    out.extend_from_slice(data);
    out
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile, TensorFileError> {
    if bytes.len() < 8 {
        return Err(TensorFileError::TooShort(bytes.len()));
    }
    if bytes[0..4] != MAGIC {
        return Err(TensorFileError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(TensorFileError::UnsupportedVersion(version));
    }
    let dtype = bytes[6];
    let ndim = bytes[7];
    if ndim as usize > MAX_NDIM {
        return Err(TensorFileError::TooManyDims(ndim));
    }
    let header_len = 8 + ndim as usize * 8;
    if bytes.len() < header_len {
        return Err(TensorFileError::TooShort(bytes.len()));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    let mut numel: usize = 1;
    for i in 0..ndim as usize {
        let start = 8 + i * 8;
        let dim = u64::from_le_bytes(bytes[start..start + 8].try_into().expect("8 bytes"));
        let dim = usize::try_from(dim).map_err(|_| TensorFileError::Overflow)?;
        numel = numel.checked_mul(dim).ok_or(TensorFileError::Overflow)?;
        shape.push(dim);
    }
    let payload = &bytes[header_len..];
    match dtype {
        0 => {
            let expected = numel.checked_mul(8).ok_or(TensorFileError::Overflow)?;
            if payload.len() != expected {
                return Err(TensorFileError::PayloadSizeMismatch {
                    got: payload.len(),
                    expected,
                });
            }
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(TensorFile { shape, data: TensorData::F64(data) })
        }
        1 => {
            if payload.len() != numel {
                return Err(TensorFileError::PayloadSizeMismatch {
                    got: payload.len(),
                    expected: numel,
                });
            }
            Ok(TensorFile { shape, data: TensorData::U8(payload.to_vec()) })
        }
        other => Err(TensorFileError::UnsupportedDtype(other)),
    }
}
