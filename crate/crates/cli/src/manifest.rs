use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::{CliError, Command};

/// Everything needed to reproduce a run: the fully resolved command (all
/// defaults materialized) plus the files it read and wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run: Command,
    pub seed: u64,
    pub model_paths: Vec<PathBuf>,
    pub dataset_paths: Vec<PathBuf>,
    pub output_paths: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: Command, seed: u64) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            run: command,
            seed,
            model_paths: Vec::new(),
            dataset_paths: Vec::new(),
            output_paths: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn finish(mut self, elapsed: Duration, path: &Path) -> Result<(), CliError> {
        self.duration_secs = elapsed.as_secs_f64();
        let mut text = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Data(format!("cannot encode manifest: {}", e)))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {}", path.display(), e)))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("malformed manifest {}: {}", path.display(), e)))
    }
}

/// `<out>.manifest.json` next to a single-file output.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
