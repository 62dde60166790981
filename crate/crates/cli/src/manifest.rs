//! `run.json`: what was run, with which configuration, and what it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};

pub const MANIFEST_NAME: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    pub checkpoint_format: u32,
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub inputs: BTreeMap<String, String>,
    pub details: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, deterministic: bool) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: tumorseg::checkpoint::FORMAT_VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            deterministic,
            inputs: BTreeMap::new(),
            details: serde_json::Value::Null,
            artifacts: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    /// Hashes every file under `out` (except the manifest) and writes it.
    pub fn write(mut self, out: &Path) -> std::io::Result<()> {
        let mut files = Vec::new();
        collect(out, out, &mut files)?;
        files.sort();
        self.artifacts = files
            .into_iter()
            .filter(|rel| rel != MANIFEST_NAME)
            .map(|rel| {
                let bytes = std::fs::read(out.join(&rel))?;
                Ok(Artifact {
                    sha256: hex(&Sha256::digest(&bytes)),
                    path: rel,
                })
            })
            .collect::<std::io::Result<_>>()?;
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(out.join(MANIFEST_NAME), text + "\n")
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}
