//! Checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u64 header length, a JSON header with
//! the network kind, architecture config and the name/shape of every tensor,
//! then all tensor elements as little-endian f64 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, NetKind};
use super::vrnn::VrnnModel;
use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"SVRNNCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: NetKind,
    config: ModelConfig,
    /// Free-form training metadata (epoch, phase, ...).
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Shape,
}

pub fn encode_checkpoint(model: &VrnnModel, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        kind: model.kind(),
        config: model.config().clone(),
        meta,
        tensors: model
            .params()
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + model.params().numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds a model, validating every tensor name and shape against the architecture.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(VrnnModel, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = VrnnModel::new(header.kind, header.config, 0)?;

    let mut data = &bytes[16 + len..];
    let mut loaded = ParamStore::new();
    for entry in &header.tensors {
        let n = entry.shape.numel();
        if data.len() < n * 8 {
            return Err(bad(&format!("truncated data for {}", entry.name)));
        }
        let values = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        loaded.add(entry.name.clone(), Tensor::from_vec(entry.shape, values)?);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    model.params_mut().load_from(&loaded)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &VrnnModel, meta: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(VrnnModel, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
