//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `PGASRCK\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then every
//! parameter as raw little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::state::{ModelState, Params};
use crate::autodiff::Tensor;
use crate::datasets::Standardizer;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PGASRCK\0";
const VERSION: u32 = 1;

/// Training-phase metadata stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: String,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub val_score: f64,
    pub seed: u64,
    pub standardizer: Option<Standardizer>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    num_nodes: usize,
    input_len: usize,
    meta: CheckpointMeta,
    tensors: Vec<TensorHeader>,
}

pub fn encode_checkpoint(state: &ModelState, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        config: state.config.clone(),
        num_nodes: state.num_nodes,
        input_len: state.input_len,
        meta: meta.clone(),
        tensors: state
            .params
            .iter()
            .map(|(name, t)| TensorHeader {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + state.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in state.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20 + header_len)
        .ok_or_else(|| fail("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| fail(e.to_string()))?;
    let mut offset = 20 + header_len;
    let mut params = Params::new();
    for t in header.tensors {
        let numel: usize = t.shape.iter().product();
        let raw = bytes
            .get(offset..offset + numel * 4)
            .ok_or_else(|| fail(format!("truncated tensor {}", t.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += numel * 4;
        params.insert(t.name, Tensor::new(t.shape, data));
    }
    if offset != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - offset)));
    }
    let state = ModelState {
        config: header.config,
        num_nodes: header.num_nodes,
        input_len: header.input_len,
        params,
    };
    state.check_shapes().map_err(|e| fail(e.to_string()))?;
    Ok((state, header.meta))
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(path: &Path, state: &ModelState, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(state, meta)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_checkpoint(&bytes, path)
}
