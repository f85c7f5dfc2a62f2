//! Content-addressed stage directories and the append-only run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Marker written last, so half-finished stages are never reused.
pub const COMPLETE: &str = "COMPLETE";
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub key: String,
    pub seed: u64,
    /// Stage keys of the prerequisites this stage consumed.
    pub inputs: BTreeMap<String, String>,
    /// Relative path to SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Key of a stage: hash of its name, its inputs and its serialized settings.
pub fn stage_key<T: Serialize>(stage: &str, inputs: &BTreeMap<String, String>, settings: &T) -> String {
    let body = serde_json::json!({ "stage": stage, "inputs": inputs, "settings": settings });
    sha256_hex(body.to_string().as_bytes())[..16].to_string()
}

/// Hashes of every regular file below `dir`, keyed by relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("below root").to_string_lossy().replace('\\', "/");
                if rel != COMPLETE {
                    out.insert(rel, sha256_hex(&fs::read(&path)?));
                }
            }
        }
    }
    Ok(out)
}

pub fn stage_dir(root: &Path, stage: &str, key: &str) -> PathBuf {
    root.join(format!("{stage}-{key}"))
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(COMPLETE).is_file()
}

pub fn mark_complete(dir: &Path) -> Result<()> {
    fs::write(dir.join(COMPLETE), b"").with_context(|| format!("writing {}", dir.display()))?;
    Ok(())
}

pub fn append(root: &Path, entry: &RunManifest) -> Result<()> {
    let path = root.join(MANIFEST);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

pub fn read(root: &Path) -> Result<Vec<RunManifest>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}
