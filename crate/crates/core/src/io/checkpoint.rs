//! Binary checkpoint format.
//!
//! ```text
//! "GALR" | version: u32 LE | header length: u64 LE | header (JSON) | payload
//! ```
//!
//! The header holds the hyperparameters and a tensor directory in parameter
//! order. Each entry gives the name, dtype (`f32`), shape, byte offset into the
//! payload and byte length; entries are contiguous and non-overlapping. The
//! payload is little-endian `f32`, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamStore;
use crate::separator::{HyperParams, SeparatorModel};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"GALR";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub hyperparams: HyperParams,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes the model; parameters are stored as `f32`.
pub fn to_bytes<F: Real>(model: &SeparatorModel<F>) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut payload = Vec::with_capacity(model.store.num_scalars() * 4);
    for (name, t) in model.store.iter() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: DType::F32,
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        hyperparams: model.hp,
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Parses and validates the prefix and header, returning it with the payload.
pub fn read_header(bytes: &[u8]) -> std::result::Result<(Header, &[u8]), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, magic needs 4",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, fixed prefix needs {PREFIX_LEN}",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREFIX_LEN..];
    if header_len > rest.len() as u64 {
        return Err(CheckpointError::Truncated(format!(
            "header declares {header_len} bytes, {} remain",
            rest.len()
        )));
    }
    let (head, payload) = rest.split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(head).map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .hyperparams
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, payload))
}

/// Checks the directory against itself and against the architecture the
/// hyperparameters describe.
fn check_directory(header: &Header, payload_len: u64) -> std::result::Result<(), CheckpointError> {
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        if e.dtype != DType::F32 {
            return Err(CheckpointError::DirectoryMismatch(format!(
                "{}: dtype {} is not f32",
                e.name, e.dtype
            )));
        }
        if e.offset != expected_offset {
            return Err(CheckpointError::DirectoryMismatch(format!(
                "{}: offset {} but previous entry ends at {expected_offset}",
                e.name, e.offset
            )));
        }
        let want = e.shape.iter().product::<usize>() as u64 * 4;
        if e.length != want {
            return Err(CheckpointError::DirectoryMismatch(format!(
                "{}: length {} bytes for shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        expected_offset += e.length;
    }
    if payload_len != expected_offset {
        return Err(CheckpointError::PayloadLengthMismatch {
            expected: expected_offset,
            actual: payload_len,
        });
    }
    let reference = SeparatorModel::<f32>::new(header.hyperparams, 0)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if reference.store.len() != header.tensors.len() {
        return Err(CheckpointError::DirectoryMismatch(format!(
            "{} tensors listed, architecture has {}",
            header.tensors.len(),
            reference.store.len()
        )));
    }
    for ((name, t), e) in reference.store.iter().zip(&header.tensors) {
        if name != e.name || t.shape() != e.shape.as_slice() {
            return Err(CheckpointError::DirectoryMismatch(format!(
                "entry {} {:?} where {name} {:?} was expected",
                e.name,
                e.shape,
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<SeparatorModel<f32>> {
    let (header, payload) = read_header(bytes)?;
    check_directory(&header, payload.len() as u64)?;
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    SeparatorModel::from_store(header.hyperparams, store)
}

pub fn save_checkpoint<F: Real>(model: &SeparatorModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SeparatorModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SeparatorModel<f32> {
        SeparatorModel::new(HyperParams::toy(), 9).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = to_bytes(&model());
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(back.store, model().store);
    }

    #[test]
    fn corruption_kinds() {
        let bytes = to_bytes(&model());
        let kind = |b: &[u8]| match from_bytes(b) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(kind(&bad), CheckpointError::BadMagic(_)));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert_eq!(kind(&bad), CheckpointError::UnsupportedVersion(7));
        assert!(matches!(kind(&bytes[..10]), CheckpointError::Truncated(_)));
        let e = kind(&bytes[..bytes.len() - 3]);
        assert!(matches!(e, CheckpointError::PayloadLengthMismatch { .. }));
        assert!(e.to_string().contains("payload length mismatch"));
        let mut bad = bytes.clone();
        bad[PREFIX_LEN] = b'#';
        assert!(matches!(kind(&bad), CheckpointError::Header(_)));
    }
}
