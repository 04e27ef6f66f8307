//! Run manifests: resolved config, overrides, input and output hashes, results.
//!
//! Everything is kept in sorted maps and written without timestamps or absolute
//! output paths, so a rerun with the same seeds reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cpcmil::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Override, RunConfig};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub config: RunConfig,
    pub overrides: Vec<Override>,
    /// Input path as given → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub results: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, overrides: &[Override]) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: config.clone(),
            overrides: overrides.to_vec(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            results: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hash every file under `dir` except the manifest itself.
    pub fn collect_outputs(&mut self, dir: &Path) -> Result<()> {
        for path in files_under(dir)? {
            let rel = path.strip_prefix(dir).unwrap_or(&path);
            if rel == Path::new(FILE_NAME) {
                continue;
            }
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            self.outputs.insert(key, sha256_file(&path)?);
        }
        Ok(())
    }

    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.collect_outputs(dir)?;
        let path = dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Regular files below `dir`, sorted by path.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// One digest over the relative paths and contents of every file under `dir`.
pub fn tree_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for p in files_under(dir)? {
        let rel = p.strip_prefix(dir).unwrap_or(&p);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&p)?);
    }
    Ok(hex::encode(h.finalize()))
}
