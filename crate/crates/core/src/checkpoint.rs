//! Checkpoints: `manifest.json` (tensor table, flags, config snapshot,
//! hashes) next to `params.bin` (little-endian f32 payload).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::is_adapter_param;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub trainable: bool,
    pub adapter: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub adapter_params: usize,
    pub payload_bytes: usize,
    pub payload_sha256: String,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes both files atomically into `dir`.
pub fn save(dir: &Path, store: &ParamStore<f32>, config: &RunConfig) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::with_capacity(store.total_count() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        let bytes = tensor_bytes(&p.tensor);
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: payload.len(),
            trainable: p.trainable,
            adapter: is_adapter_param(&p.name),
            sha256: sha(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors,
        total_params: store.total_count(),
        trainable_params: store.count_where(|p| p.trainable),
        adapter_params: store.count_where(|p| is_adapter_param(&p.name)),
        payload_bytes: payload.len(),
        payload_sha256: sha(&payload),
    };
    write_atomic(&dir.join(PAYLOAD), &payload)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::format(&path, "manifest", e.to_string()))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

/// Loads parameters into `store`, which must hold exactly the manifest's
/// tensors with the same shapes. Values and trainable flags are restored;
/// nothing is written unless every check passes.
pub fn load_into(dir: &Path, store: &mut ParamStore<f32>) -> Result<Manifest> {
    let m = read_manifest(dir)?;
    let path = dir.join(PAYLOAD);
    let payload = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if payload.len() != m.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, manifest says {}",
            path.display(),
            payload.len(),
            m.payload_bytes
        )));
    }
    for e in &m.tensors {
        let Some(p) = store.get(&e.name) else {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` is not part of the model",
                e.name
            )));
        };
        if p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: checkpoint shape {:?} vs model shape {:?}",
                e.name,
                e.shape,
                p.tensor.shape()
            )));
        }
    }
    if let Some(p) = store.iter().find(|p| !m.tensors.iter().any(|e| e.name == p.name)) {
        return Err(Error::Checkpoint(format!(
            "tensor `{}` missing from checkpoint",
            p.name
        )));
    }
    let mut chunks = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        let bytes = payload.get(e.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!(
                "tensor `{}`: payload range {}..{end} out of bounds",
                e.name, e.offset
            ))
        })?;
        if sha(bytes) != e.sha256 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: hash mismatch (corrupt payload)",
                e.name
            )));
        }
        chunks.push(bytes);
    }
    if sha(&payload) != m.payload_sha256 {
        return Err(Error::Checkpoint(format!("{}: payload hash mismatch", path.display())));
    }
    for (e, bytes) in m.tensors.iter().zip(chunks) {
        let p = store.get_mut(&e.name).expect("checked above");
        for (v, c) in p.tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        p.trainable = e.trainable;
    }
    Ok(m)
}
