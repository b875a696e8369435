//! Checkpoint file: `FASTCKPT`, u32 version, u64 header length, JSON header
//! (config and tensor table), then raw little-endian `f32` payloads in table
//! order. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{numel, DType, Tensor};

use super::config::FastConfig;
use super::params::{check_store, ParamKind, ParamStore};

pub const MAGIC: &[u8; 8] = b"FASTCKPT";
pub const VERSION: u32 = 1;
/// Bytes before the JSON header.
pub const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    dtype: DType,
    /// Byte offset from the start of the payload section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: FastConfig,
    tensors: Vec<TensorRecord>,
}

pub fn encode_checkpoint(cfg: &FastConfig, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    check_store(cfg, store)?;
    let mut offset = 0;
    let tensors = store
        .entries()
        .iter()
        .map(|e| {
            let r = TensorRecord {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                dtype: DType::F32,
                offset,
            };
            offset += 4 * e.value.len();
            r
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: cfg.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(FastConfig, ParamStore<f32>)> {
    let fmt = |m: String| Error::Format(m);
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("checkpoint truncated inside the header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| fmt(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for r in header.tensors {
        if r.dtype != DType::F32 {
            return Err(fmt(format!("tensor {} has dtype {}", r.name, r.dtype)));
        }
        if r.offset != expected_offset {
            return Err(fmt(format!("tensor {} at offset {}, expected {expected_offset}", r.name, r.offset)));
        }
        let n = numel(&r.shape);
        let end = r.offset + 4 * n;
        if end > payload.len() {
            return Err(fmt(format!("checkpoint truncated inside tensor {}", r.name)));
        }
        let data = payload[r.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(r.shape, data).map_err(|e| fmt(e.to_string()))?;
        store.push(r.name, r.kind, value)?;
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(fmt(format!(
            "{} trailing bytes after the last tensor",
            payload.len() - expected_offset
        )));
    }
    check_store(&header.config, &store)?;
    Ok((header.config, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &FastConfig, store: &ParamStore<f32>) -> Result<()> {
    let bytes = encode_checkpoint(cfg, store)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FastConfig, ParamStore<f32>)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
