//! Tensor container file format.
//!
//! Layout, in order:
//!   1. magic bytes `VMF1`
//!   2. header length as u32 little-endian
//!   3. JSON header `{"entries": [{name, dtype, shape, offset, length}, ..]}`
//!   4. raw payloads, little-endian, row-major
//!
//! `offset` and `length` are in bytes relative to the first byte after the
//! header. Entries are written in the order given and read back in file
//! order; duplicate names are rejected on both paths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"VMF1";

/// Tensor of either supported dtype, as stored in a container file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

/// Tags a generic tensor with its runtime dtype.
pub fn any_from<T: Scalar>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        Dtype::F32 => AnyTensor::F32(t.cast()),
        Dtype::F64 => AnyTensor::F64(t.cast()),
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested scalar type. Exact when dtypes match or when
    /// widening f32 data into f64.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            AnyTensor::F32(t) => {
                out.reserve(t.numel() * 4);
                for &x in t.data() {
                    x.write_le(&mut out);
                }
            }
            AnyTensor::F64(t) => {
                out.reserve(t.numel() * 8);
                for &x in t.data() {
                    x.write_le(&mut out);
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<HeaderEntry>,
}

/// Serializes the named tensors to `path`. Entry order is preserved.
pub fn save_tensors(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    fs::write(path, encode_tensors(entries)?)?;
    Ok(())
}

/// In-memory encoder behind [`save_tensors`].
pub fn encode_tensors(entries: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::format(format!("duplicate tensor name {name:?}")));
        }
    }

    let mut header = Header {
        entries: Vec::with_capacity(entries.len()),
    };
    let mut payload = Vec::new();
    for (name, tensor) in entries {
        let bytes = tensor.payload_bytes();
        header.entries.push(HeaderEntry {
            name: name.clone(),
            dtype: tensor.dtype().name().to_string(),
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
            length: bytes.len(),
        });
        payload.extend_from_slice(&bytes);
    }

    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + 4 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads a container file back. Exact inverse of [`save_tensors`].
pub fn load_tensors(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    decode_tensors(&fs::read(path)?)
}

/// In-memory decoder behind [`load_tensors`].
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    if bytes.len() < 8 {
        return Err(Error::format("container shorter than fixed prelude"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let payload_base = 8 + header_len;
    if bytes.len() < payload_base {
        return Err(Error::format("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..payload_base])?;
    let payload = &bytes[payload_base..];

    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(header.entries.len());
    for entry in &header.entries {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::format(format!(
                "duplicate tensor name {:?}",
                entry.name
            )));
        }
        let dtype = Dtype::parse(&entry.dtype)?;
        let numel: usize = entry.shape.iter().product();
        if entry.length != numel * dtype.size() {
            return Err(Error::format(format!(
                "entry {:?}: length {} does not match shape {:?} of dtype {}",
                entry.name,
                entry.length,
                entry.shape,
                dtype.name()
            )));
        }
        let end = entry.offset.checked_add(entry.length).ok_or_else(|| {
            Error::format(format!("entry {:?}: offset overflow", entry.name))
        })?;
        if end > payload.len() {
            return Err(Error::format(format!(
                "truncated payload: entry {:?} wants bytes {}..{} of {}",
                entry.name,
                entry.offset,
                end,
                payload.len()
            )));
        }
        let raw = &payload[entry.offset..end];
        let tensor = match dtype {
            Dtype::F32 => {
                let data = raw.chunks_exact(4).map(f32::read_le).collect();
                AnyTensor::F32(Tensor::from_vec(&entry.shape, data)?)
            }
            Dtype::F64 => {
                let data = raw.chunks_exact(8).map(f64::read_le).collect();
                AnyTensor::F64(Tensor::from_vec(&entry.shape, data)?)
            }
        };
        out.push((entry.name.clone(), tensor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample_entries() -> Vec<(String, AnyTensor)> {
        let mut r = rng::rng_from(11);
        vec![
            (
                "a/weight".to_string(),
                rng::normal_tensor::<f32>(&mut r, &[3, 4]).into(),
            ),
            (
                "a/bias".to_string(),
                rng::normal_tensor::<f64>(&mut r, &[4]).into(),
            ),
            ("empty".to_string(), Tensor::<f32>::zeros(&[0]).into()),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let entries = sample_entries();
        let bytes = encode_tensors(&entries).unwrap();
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(entries, back);
        // Re-encoding what we decoded reproduces the same file.
        assert_eq!(bytes, encode_tensors(&back).unwrap());
    }

    #[test]
    fn empty_map_is_a_valid_file() {
        let bytes = encode_tensors(&[]).unwrap();
        let back = decode_tensors(&bytes).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_tensors(&sample_entries()).unwrap();
        bytes[0] = b'X';
        let err = decode_tensors(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Format(_)),
            "bad magic must be a format error, got {err:?}"
        );
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode_tensors(&sample_entries()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(decode_tensors(cut).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected_on_save() {
        let t: AnyTensor = Tensor::<f32>::zeros(&[2]).into();
        let entries = vec![("x".to_string(), t.clone()), ("x".to_string(), t)];
        assert!(encode_tensors(&entries).is_err());
    }
}
