//! Run manifests: what a command read, with which seed and settings, and which code.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const CODE_VERSION: &str = concat!("stainbench ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Serialize)]
struct Input {
    role: String,
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    code_version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    inputs: Vec<Input>,
    #[serde(skip_serializing_if = "Option::is_none")]
    settings: Option<toml::Table>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        RunManifest { command: command.into(), code_version: CODE_VERSION, seed, inputs: Vec::new(), settings: None }
    }

    /// Records `path` with its size and digest.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(Input {
            role: role.into(),
            path: path.to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn settings<T: Serialize>(&mut self, value: &T) {
        self.settings = Some(toml::Table::try_from(value).expect("settings serialize to a table"));
    }

    pub fn setting(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.settings.get_or_insert_with(toml::Table::new).insert(key.into(), value.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("run manifest serializes");
        write_file(path, text.as_bytes())
    }
}

/// `<file>.run.toml` beside an output file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.toml");
    PathBuf::from(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
