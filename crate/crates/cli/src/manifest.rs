//! Provenance record written next to every command's output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Params;

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub code_version: &'a str,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: &'a BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// `<dir>/manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

/// Writes the manifest and returns the SHA-256 of its bytes.
pub fn write(
    command: &str,
    params: &Params,
    seed: Option<u64>,
    inputs: &[&Path],
    out: &Path,
    is_dir: bool,
) -> Result<String> {
    let m = Manifest {
        command,
        code_version: dbn_core::pipeline::CODE_VERSION,
        seed,
        config_hash: params.hash(),
        config: params.map(),
        inputs: display(inputs),
        outputs: display(&[out]),
    };
    let mut bytes = serde_json::to_vec_pretty(&m)?;
    bytes.push(b'\n');
    let path = manifest_path(out, is_dir);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
