use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub path: PathBuf,
    pub sha256: String,
}

/// One per command invocation, written last into the output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<OutputEntry>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Collects inputs and outputs while a command runs; every output goes
/// through [`Recorder::write`] so the manifest lists it with its digest.
pub struct Recorder {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, out_dir: &Path, config: &impl Serialize) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let config_digest = sha256_hex(&serde_json::to_vec(config)?);
        Ok(Recorder {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_digest,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
            },
        })
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        let d = file_digest(path)?;
        self.manifest.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    /// Records a non-file input, such as a remote endpoint or shipped assets.
    pub fn input_named(&mut self, name: &str, digest: String) {
        self.manifest.inputs.insert(name.to_string(), digest);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(OutputEntry {
            path: path.clone(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.finished_unix_ms = now_ms();
        let path = self.out_dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}
