use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crowdcount::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run.json";

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, base, out)?;
        } else if p != base.join(MANIFEST_NAME) {
            let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

pub struct Recorder {
    command: String,
    start: Instant,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            start: Instant::now(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: BTreeMap::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T, seed: Option<u64>) -> Result<()> {
        self.config = serde_json::to_value(cfg)?;
        self.seed = seed;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let target = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        self.inputs.insert(target.display().to_string(), sha256_file(&target)?);
        Ok(())
    }

    /// Hashes everything under `out` and writes the manifest there.
    pub fn finish(self, out: &Path) -> Result<()> {
        let mut outputs = BTreeMap::new();
        walk(out, out, &mut outputs)?;
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            duration_secs: self.start.elapsed().as_secs_f64(),
        };
        fs::write(out.join(MANIFEST_NAME), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}
