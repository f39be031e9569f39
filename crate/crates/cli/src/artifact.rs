//! Files written by the harness, each recorded with its SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` under `root/rel`, creating parent directories.
pub fn write(root: &Path, rel: &str, bytes: &[u8]) -> Result<Artifact> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    fs::write(&path, bytes).map_err(HarnessError::io(&path))?;
    Ok(Artifact {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
    })
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(HarnessError::io(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_string(path)?)?)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Combined digest of a list of artifacts, in list order.
pub fn combined_digest(artifacts: &[Artifact]) -> String {
    let mut h = Sha256::new();
    for a in artifacts {
        h.update(a.path.as_bytes());
        h.update([0]);
        h.update(a.sha256.as_bytes());
        h.update(*b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory: the explicit flag, else `$DRUM_OUTPUT_ROOT/<leaf>`,
/// else `./drum-output/<leaf>`.
pub fn output_dir(explicit: Option<&Path>, leaf: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let root = std::env::var_os("DRUM_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("drum-output"));
    root.join(leaf)
}

/// File-system friendly form of a method name.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}
