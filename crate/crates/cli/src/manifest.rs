//! Run manifests: resolved configuration, seeds and content digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fibresr::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a command. Holds no timestamps or absolute
/// paths, so identical runs write identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Command-specific settings not covered by the config (paths given on
    /// the command line, resume point, ...).
    pub arguments: BTreeMap<String, String>,
    /// Deliberate departures from the published training scale.
    pub deviations: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> RunManifest {
        let mut seeds = BTreeMap::new();
        seeds.insert("master".to_string(), config.seed);
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds,
            arguments: BTreeMap::new(),
            deviations: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, stream: &str) {
        let v = fibresr::seed::derive(self.config.seed, stream, 0);
        self.seeds.insert(stream.to_string(), v);
    }

    pub fn argument(&mut self, key: &str, value: impl ToString) {
        self.arguments.insert(key.to_string(), value.to_string());
    }

    /// Records `files` as inputs, named relative to `root` under `label`.
    pub fn add_inputs(&mut self, label: &str, root: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            self.inputs.push(digest_entry(label, root, f)?);
        }
        self.inputs.sort();
        Ok(())
    }

    /// Digests every regular file under `dir` (recursively) as outputs,
    /// except the manifest itself.
    pub fn collect_outputs(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(dir, &mut files)?;
        files.retain(|f| f.file_name().and_then(|n| n.to_str()) != Some(MANIFEST_NAME));
        self.outputs.clear();
        for f in &files {
            self.outputs.push(digest_entry("", dir, f)?);
        }
        self.outputs.sort();
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

fn digest_entry(label: &str, root: &Path, file: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(file).map_err(|e| Error::io(file, e))?;
    let rel = file.strip_prefix(root).unwrap_or(file);
    let rel = rel.to_string_lossy().replace('\\', "/");
    Ok(FileDigest {
        path: if label.is_empty() {
            rel
        } else {
            format!("{label}:{rel}")
        },
        sha256: sha256_hex(&bytes),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
