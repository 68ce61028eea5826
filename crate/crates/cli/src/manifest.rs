use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv: std::env::args().collect(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    pub fn extend<K: ToString, V: ToString>(&mut self, kv: impl IntoIterator<Item = (K, V)>) {
        for (k, v) in kv {
            self.config.insert(k.to_string(), v.to_string());
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), String> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), String> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes `<dir>/<command>.manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, String> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| e.to_string())?;
        fs::write(&path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(path)
    }
}
