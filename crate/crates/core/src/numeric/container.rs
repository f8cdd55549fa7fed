//! The `TNSR1` tensor container.
//!
//! Layout: one line of JSON
//! `{"dtype":"f32","shape":[...],"order":"row-major","endian":"little"}`
//! terminated by `\n`, followed by exactly `product(shape) * 4` bytes of
//! little-endian IEEE-754 single precision values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Float, Tensor};
use crate::error::{AsdError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
    endian: String,
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let header = Header {
        dtype: "f32".into(),
        shape: tensor.shape().to_vec(),
        order: "row-major".into(),
        endian: "little".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(tensor.numel() * 4);
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| AsdError::Format("TNSR1: missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| AsdError::Format(format!("TNSR1 header: {e}")))?;
    if header.dtype != "f32" || header.order != "row-major" || header.endian != "little" {
        return Err(AsdError::Format(format!(
            "TNSR1: unsupported layout {}/{}/{}",
            header.dtype, header.order, header.endian
        )));
    }
    let numel: usize = header.shape.iter().product();
    let payload = &bytes[newline + 1..];
    if payload.len() != numel * 4 {
        return Err(AsdError::Format(format!(
            "TNSR1: expected {} payload bytes for shape {:?}, found {}",
            numel * 4,
            header.shape,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Float)
        .collect();
    Tensor::new(header.shape, data).map_err(|e| AsdError::Format(format!("TNSR1: {e}")))
}

pub fn write(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| AsdError::io(path, e))?;
    file.write_all(&encode(tensor))
        .map_err(|e| AsdError::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AsdError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let expected_header = br#"{"dtype":"f32","shape":[2],"order":"row-major","endian":"little"}"#;
        assert_eq!(&bytes[..expected_header.len()], expected_header);
        assert_eq!(bytes[expected_header.len()], b'\n');
        assert_eq!(&bytes[expected_header.len() + 1..][..4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), expected_header.len() + 1 + 8);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = encode(&t);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 3.25, 7.0, 0.0, -0.125]).unwrap();
        assert_eq!(decode(&encode(&t)).unwrap(), t);
    }
}
