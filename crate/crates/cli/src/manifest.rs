use std::path::{Path, PathBuf};

use anyhow::Result;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use soi_core::report::{sha256_file, write_json};
use soi_core::SoiConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: SoiConfig,
    pub config_fingerprint: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub tool_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

pub struct ManifestBuilder {
    command: String,
    config: SoiConfig,
    inputs: Vec<PathBuf>,
    started_at: DateTime<Utc>,
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for p in paths {
        out.push(FileDigest {
            path: p.clone(),
            sha256: sha256_file(p)?,
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &SoiConfig) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: config.clone(),
            inputs: Vec::new(),
            started_at: Utc::now(),
        }
    }

    pub fn input(&mut self, path: impl AsRef<Path>) {
        self.inputs.push(path.as_ref().to_path_buf());
    }

    pub fn inputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.inputs.extend(paths);
    }

    pub fn finish(self, outputs: &[PathBuf], manifest_path: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config_fingerprint: self.config.fingerprint(),
            config: self.config,
            inputs: digests(&self.inputs)?,
            outputs: digests(outputs)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: Utc::now(),
        };
        write_json(manifest_path, &manifest)?;
        Ok(manifest)
    }
}
