use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use vio_core::simulator::{DatasetError, SimConfig};

/// Everything needed to repeat a command, written as `manifest.toml`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_path: Option<String>,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// `ok`, or `failed: <reason>` when outputs are partial.
    pub status: String,
    pub parameters: BTreeMap<String, String>,
    pub config: Option<SimConfig>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_path: None,
            seeds: Vec::new(),
            output_dir: output_dir.display().to_string(),
            started_unix: unix_now(),
            finished_unix: 0.0,
            status: "running".into(),
            parameters: BTreeMap::new(),
            config: None,
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.parameters.insert(key.to_string(), value.to_string());
    }

    pub fn finish(&mut self, dir: &Path, status: &str) -> Result<(), DatasetError> {
        self.finished_unix = unix_now();
        self.status = status.to_string();
        let text = toml::to_string(self).expect("manifest serializes");
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).map_err(|source| DatasetError::Io { path, source })
    }
}
