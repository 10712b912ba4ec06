//! `manifest.json`: per-stage config snapshots, metrics and timings, plus a
//! checksum for every file under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

pub const EVALUATION_PROTOCOL: &str =
    "normalized score of the mean return over evaluation episodes rolled out after training completes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    /// Distinguishes repeated runs of one command, e.g. per reward source.
    pub key: String,
    pub config: Value,
    pub metrics: Value,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub evaluation_protocol: String,
    pub stages: Vec<StageRecord>,
    /// Relative path → sha256 of every file in the output directory other
    /// than the manifests themselves.
    pub artifacts: BTreeMap<String, String>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            evaluation_protocol: EVALUATION_PROTOCOL.into(),
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every regular file below `dir`, relative, with `/` separators, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn is_manifest(rel: &str) -> bool {
    rel == MANIFEST_FILE || rel.ends_with(&format!("/{MANIFEST_FILE}"))
}

/// Checksums of every non-manifest file below `dir`.
pub fn artifact_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    list_files(dir)?
        .into_iter()
        .filter(|rel| !is_manifest(rel))
        .map(|rel| {
            let h = sha256_file(&dir.join(&rel))?;
            Ok((rel, h))
        })
        .collect()
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Ok(RunManifest::default());
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Adds `stage` (replacing any earlier record with the same command and
/// key), rescans the directory and rewrites the manifest.
pub fn record_stage(dir: &Path, stage: StageRecord) -> Result<RunManifest> {
    let mut manifest = load_manifest(dir)?;
    manifest.stages.retain(|s| !(s.command == stage.command && s.key == stage.key));
    manifest.stages.push(stage);
    manifest.artifacts = artifact_hashes(dir)?;
    fs::write(manifest_path(dir), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
