//! Binary tensor container.
//!
//! Layout: an 8-byte little-endian header length `L`, then `L` bytes of
//! UTF-8 JSON listing `{name, shape, dtype, byte_offset}` per tensor, then the
//! raw little-endian value buffers. `byte_offset` counts from the first byte
//! after the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::float::{DType, Float};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: usize,
}

pub fn encode<E: Float>(tensors: &[(&str, &Tensor<E>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut body = Vec::new();
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: E::DTYPE,
            byte_offset: body.len(),
        });
        for &v in t.data() {
            v.write_le(&mut body);
        }
    }
    let header = serde_json::to_vec(&entries).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header.len() + body.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes a container; values stored at another precision are converted.
pub fn decode<E: Float>(bytes: &[u8]) -> Result<Vec<(String, Tensor<E>)>> {
    let fmt = |m: String| TensorError::Format(m);
    if bytes.len() < 8 {
        return Err(fmt("truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt(format!("header length {hlen} exceeds file")))?;
    let entries: Vec<Entry> =
        serde_json::from_slice(&bytes[8..body_start]).map_err(|e| fmt(format!("header: {e}")))?;
    let body = &bytes[body_start..];
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let size = e.dtype.size();
        let n = numel(&e.shape);
        let end = e.byte_offset + n * size;
        if end > body.len() {
            return Err(fmt(format!("tensor {:?} runs past end of file", e.name)));
        }
        let raw = &body[e.byte_offset..end];
        let data: Vec<E> = match e.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| E::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| E::of(f64::read_le(c))).collect(),
        };
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn save<E: Float>(path: &Path, tensors: &[(&str, &Tensor<E>)]) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load<E: Float>(path: &Path) -> Result<Vec<(String, Tensor<E>)>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let a = Tensor::<f32>::new(vec![2, 3], vec![0.1, -2.5, f32::MIN_POSITIVE, 7.0, 1e-30, 3.25]).unwrap();
        let b = Tensor::<f32>::scalar(42.0);
        let bytes = encode(&[("a", &a), ("b.c", &b)]).unwrap();
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].0, "b.c");
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn header_is_json_with_offsets() {
        let a = Tensor::<f64>::zeros(&[3]);
        let b = Tensor::<f64>::ones(&[2, 2]);
        let bytes = encode(&[("a", &a), ("b", &b)]).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let entries: Vec<Entry> = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(entries[1].byte_offset, 24);
        assert_eq!(entries[1].dtype, DType::F64);
        assert_eq!(bytes.len(), 8 + hlen + 7 * 8);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let a = Tensor::<f32>::ones(&[4]);
        let mut bytes = encode(&[("a", &a)]).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode::<f32>(&bytes), Err(TensorError::Format(_))));
    }
}
