use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::dataset::RNG_ALGORITHM;
use crate::vit_model::OSVT_VERSION;
use crate::volume::RVOL_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub osvit: String,
    pub rvol: u8,
    pub osvt: u32,
    pub rng: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            osvit: env!("CARGO_PKG_VERSION").to_string(),
            rvol: RVOL_VERSION,
            osvt: OSVT_VERSION,
            rng: RNG_ALGORITHM.to_string(),
        }
    }
}

/// Provenance record written by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub status: RunStatus,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    /// Every setting the command ran with, defaults included.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub versions: Versions,
}

/// UTC timestamp honouring `SOURCE_DATE_EPOCH`.
pub fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0)
        });
    DateTime::<Utc>::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Keeps the manifest file in sync with the run.
pub struct ManifestWriter {
    path: PathBuf,
    pub manifest: RunManifest,
}

impl ManifestWriter {
    /// Writes the manifest with status `running`.
    pub fn start(
        path: impl Into<PathBuf>,
        command: &str,
        argv: &[String],
        threads: usize,
    ) -> Result<Self, CliError> {
        let writer = Self {
            path: path.into(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                status: RunStatus::Running,
                exit_code: None,
                error: None,
                config: serde_json::Value::Null,
                seed: None,
                threads,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_at: timestamp(),
                finished_at: None,
                versions: Versions::default(),
            },
        };
        writer.write()?;
        Ok(writer)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.manifest
            .inputs
            .insert(key.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, key: &str, path: &Path) {
        self.manifest
            .outputs
            .insert(key.to_string(), path.display().to_string());
    }

    pub fn write(&self) -> Result<(), CliError> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&self.path, text + "\n").map_err(|e| CliError::io(&self.path, e))
    }

    /// Records the outcome. A failure to write is reported only if the run itself succeeded.
    pub fn finish(mut self, error: Option<&CliError>) -> Result<(), CliError> {
        self.manifest.finished_at = Some(timestamp());
        match error {
            None => {
                self.manifest.status = RunStatus::Succeeded;
                self.manifest.exit_code = Some(0);
            }
            Some(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.exit_code = Some(e.exit_code());
                self.manifest.error = Some(e.to_string());
            }
        }
        let written = self.write();
        if error.is_none() {
            written
        } else {
            Ok(())
        }
    }
}
