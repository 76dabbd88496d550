//! Checkpoint format: a JSON manifest plus a sidecar of little-endian `f32`s.
//!
//! `<stem>.json` records the format version, the architecture, the seed and the
//! name/shape of every tensor; `<stem>.bin` holds the tensor values concatenated
//! in manifest order. A save/load round trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: String,
    pub kind: String,
    pub seed: u64,
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_checkpoint(
    stem: &Path,
    kind: &str,
    arch: serde_json::Value,
    meta: serde_json::Value,
    store: &ParamStore<f32>,
) -> Result<CheckpointManifest> {
    let (json_path, bin_path) = paths(stem);
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION.to_string(),
        kind: kind.to_string(),
        seed: store.seed(),
        arch,
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let mut bytes = Vec::with_capacity(store.numel() * 4);
    for (_, t) in store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let (json_path, _) = paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION.to_string(),
            found: manifest.format_version,
        });
    }
    Ok(manifest)
}

pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointManifest, ParamStore<f32>)> {
    let manifest = read_manifest(stem)?;
    let (_, bin_path) = paths(stem);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != expected * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes of f32 data, found {}",
            bin_path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    let mut store = ParamStore::new(manifest.seed);
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for entry in &manifest.tensors {
        let n = entry.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        store.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?)?;
    }
    Ok((manifest, store))
}
