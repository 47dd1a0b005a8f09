//! Output directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: String,
    command: &'a str,
    seed: Option<u64>,
    workers: Option<u16>,
    config_sha256: String,
    inputs: &'a [FileEntry],
    artifacts: &'a [FileEntry],
}

/// Collects the inputs and artifacts of one command run.
pub struct Run {
    command: &'static str,
    dir: PathBuf,
    workers: Option<u16>,
    inputs: Vec<FileEntry>,
    artifacts: Vec<FileEntry>,
}

impl Run {
    pub fn new(command: &'static str, dir: &Path, workers: Option<u16>) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Run {
            command,
            dir: dir.to_path_buf(),
            workers,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    /// Records an input file by content hash.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        self.artifacts.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes the resolved configuration and the manifest.
    pub fn finish<T: Serialize>(mut self, resolved: &T, seed: Option<u64>) -> CliResult<()> {
        let mut config = serde_json::to_string_pretty(resolved).map_err(|e| CliError::Internal(e.to_string()))?;
        config.push('\n');
        self.write("config.json", config.as_bytes())?;
        let manifest = Manifest {
            tool: format!("cvr {}", env!("CARGO_PKG_VERSION")),
            command: self.command,
            seed,
            workers: self.workers,
            config_sha256: sha256_hex(config.as_bytes()),
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}
