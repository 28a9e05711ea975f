//! Model checkpoint file.
//!
//! Layout: the 8-byte magic `VSEGMDL\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (config,
//! training metadata, parameter names and shapes), then every parameter's
//! values as little-endian `f64` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::network::{NetworkConfig, NetworkModel, Param, TrainingMeta};
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VSEGMDL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    meta: TrainingMeta,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &NetworkModel) -> Vec<u8> {
    let header = Header {
        config: model.config().clone(),
        meta: model.meta.clone(),
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + model.num_weights() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.value.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkModel> {
    let corrupt = |msg: &str| Error::CorruptModel(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing model file signature"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CorruptModel(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::CorruptModel(format!("bad header: {e}")))?;
    let mut data = &body[header_len..];
    let expected: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 8)
        .sum();
    if data.len() != expected {
        return Err(Error::CorruptModel(format!(
            "weight section holds {} bytes, header describes {expected}",
            data.len()
        )));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let (chunk, rest) = data.split_at(n * 8);
        data = rest;
        let values = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name: entry.name,
            value: Tensor::from_vec(&entry.shape, values)?,
        });
    }
    NetworkModel::from_parts(header.config, params, header.meta)
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
