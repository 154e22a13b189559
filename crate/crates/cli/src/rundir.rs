//! Run directories and their manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_sha256: String,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An output directory that records every file written through it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    subcommand: String,
    seed: u64,
    config_sha256: String,
    started_at: String,
    artifacts: Vec<Artifact>,
}

impl RunDir {
    /// Creates `root` and echoes the resolved config into it. An existing
    /// directory must be empty.
    pub fn create(root: &Path, subcommand: &str, seed: u64, resolved_toml: &str) -> CliResult<Self> {
        if root.exists() {
            let mut entries = fs::read_dir(root)
                .map_err(|e| CliError::Config(format!("output directory {}: {e}", root.display())))?;
            if entries.next().is_some() {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root)?;
        let mut dir = Self {
            root: root.to_path_buf(),
            subcommand: subcommand.to_string(),
            seed,
            config_sha256: sha256_hex(resolved_toml.as_bytes()),
            started_at: now(),
            artifacts: Vec::new(),
        };
        dir.write_bytes(RESOLVED_CONFIG, resolved_toml.as_bytes())?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Buffers whatever `fill` writes and stores it as `name`.
    pub fn write_with<F>(&mut self, name: &str, fill: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> tokenflip_core::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|source| CliError::Runtime {
            context: format!("writing {name}"),
            source,
        })?;
        self.write_bytes(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime {
            context: format!("writing {name}"),
            source: e.into(),
        })?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `manifest.json` and returns it.
    pub fn finish(self) -> CliResult<RunManifest> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand,
            seed: self.seed,
            config_sha256: self.config_sha256,
            started_at: self.started_at,
            finished_at: now(),
            artifacts: self.artifacts,
        };
        let file = fs::File::create(self.root.join(MANIFEST))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(manifest)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
