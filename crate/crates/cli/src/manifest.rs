//! Run manifests: every command writes exactly one `manifest.json` into its
//! output directory, recording the command, tool version, master seed,
//! content digests of all inputs and outputs, and the config snapshot.
//! Reruns with identical inputs and seed produce byte-identical primary
//! outputs; only the manifest's timestamp may differ.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub created_at: String,
}

/// Collects outputs as they are written and finalizes the manifest.
pub struct OutDir {
    dir: PathBuf,
    command: String,
    master_seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(dir: &Path, command: &str, master_seed: u64) -> Result<OutDir> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            master_seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), digest_file(path)?);
        Ok(())
    }

    /// Writes a primary output file inside the directory and records its
    /// digest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// A deterministic run identifier derived from the input digests; used
    /// where an output needs a stamp but must stay rerun-stable.
    pub fn run_id(&self) -> String {
        let joined: String = self
            .inputs
            .iter()
            .map(|(k, v)| format!("{k}={v};"))
            .collect();
        format!("run-{}", &sha256_hex(joined.as_bytes())[..12])
    }

    pub fn finalize(self, config: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: self.master_seed,
            inputs: self.inputs,
            outputs: self.outputs,
            config,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.dir.join("manifest.json");
        let body = serde_json::to_vec_pretty(&manifest)?;
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
