use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glatts_core::model::checkpoint::write_atomic;
use glatts_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: BTreeMap::new(),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config_pairs(&mut self, pairs: Vec<(&'static str, String)>) -> &mut Self {
        self.config.extend(pairs.into_iter().map(|(k, v)| (k.to_string(), v)));
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.into(), value.to_string());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = std::fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Writes `<stem>.manifest.json` beside a file output, or
    /// `manifest.json` inside a directory output.
    pub fn write_beside(&self, out: &Path) -> Result<PathBuf> {
        let path = if out.is_dir() {
            out.join("manifest.json")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        };
        let text = serde_json::to_string_pretty(self).map_err(glatts_core::Error::from)?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
