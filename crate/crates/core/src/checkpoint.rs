//! Checkpoint format: one JSON header line followed by named flat arrays of
//! little-endian f32 values, in header order. Loaders reject checkpoints
//! whose config hash does not match the requesting model's.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nets::hex_string;
use crate::synthdata::Task;

const MAGIC: &str = "xdistill-ckpt-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub task: Task,
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub val_loss: f64,
    /// Content hashes of the frozen teacher checkpoints a joint checkpoint
    /// was built from; empty for plain models.
    pub teacher_hashes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

/// Quantize parameters to f32 precision in place, so the in-memory model
/// and its serialized form agree exactly.
pub fn round_params_to_f32(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        for v in store.value_mut(id) {
            *v = *v as f32 as f64;
        }
    }
}

pub fn save(path: &Path, meta: &CheckpointMeta, store: &ParamStore, ids: &[ParamId]) -> Result<()> {
    let header = Header {
        magic: MAGIC.to_string(),
        meta: meta.clone(),
        arrays: ids
            .iter()
            .map(|&id| ArrayEntry {
                name: store.name(id).to_string(),
                len: store.value(id).len(),
            })
            .collect(),
    };
    let mut buf = serde_json::to_string(&header)
        .map_err(|e| Error::Other(format!("checkpoint header encode: {e}")))?
        .into_bytes();
    buf.push(b'\n');
    for &id in ids {
        for v in store.value(id) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Load parameter values into `store`, verifying the config hash, array
/// names and lengths. Returns the checkpoint metadata.
pub fn load(
    path: &Path,
    expected_config_hash: &str,
    store: &mut ParamStore,
    ids: &[ParamId],
) -> Result<CheckpointMeta> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "missing header".into(),
        })?;
    let header: Header = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("bad header: {e}"),
    })?;
    if header.magic != MAGIC {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("bad magic {}", header.magic),
        });
    }
    if header.meta.config_hash != expected_config_hash {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "config hash mismatch: checkpoint {}, model {}",
                header.meta.config_hash, expected_config_hash
            ),
        });
    }
    if header.arrays.len() != ids.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected {} arrays, found {}", ids.len(), header.arrays.len()),
        });
    }
    let mut off = newline + 1;
    for (entry, &id) in header.arrays.iter().zip(ids) {
        if entry.name != store.name(id) || entry.len != store.value(id).len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "array mismatch: checkpoint {}[{}], model {}[{}]",
                    entry.name,
                    entry.len,
                    store.name(id),
                    store.value(id).len()
                ),
            });
        }
        let need = entry.len * 4;
        if off + need > bytes.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "truncated payload".into(),
            });
        }
        let dst = store.value_mut(id);
        for (k, chunk) in bytes[off..off + need].chunks_exact(4).enumerate() {
            dst[k] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        off += need;
    }
    if off != bytes.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "trailing bytes".into(),
        });
    }
    Ok(header.meta)
}

/// Read just the metadata without touching any parameters.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "missing header".into(),
        })?;
    let header: Header = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("bad header: {e}"),
    })?;
    Ok(header.meta)
}

/// SHA-256 of the checkpoint file, used to pin frozen teachers inside
/// joint-teacher checkpoints.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_string(&h.finalize()))
}
