//! Run manifests, appended one JSON object per line to `manifest.jsonl`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Version string in `git describe` shape: the package version, plus the
/// commit when one was provided at build time.
pub fn version_string() -> String {
    match option_env!("FLOWVO_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Every effective setting, defaults included, as `[key, value]` pairs.
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub start_time: f64,
    pub end_time: f64,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
    /// `ok` or the error message of a failed run.
    pub status: String,
}

impl RunManifest {
    pub fn begin(command: &str, config: Vec<(String, String)>, seed: u64) -> Self {
        let now = unix_now();
        Self {
            command: command.to_string(),
            config,
            seed,
            version: version_string(),
            start_time: now,
            end_time: now,
            wall_seconds: 0.0,
            outputs: Vec::new(),
            status: "ok".into(),
        }
    }

    pub fn finish(&mut self, outputs: &[PathBuf], status: &str) {
        self.end_time = unix_now();
        self.wall_seconds = (self.end_time - self.start_time).max(0.0);
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        self.status = status.to_string();
    }

    /// Appends this manifest as one line of `dir/manifest.jsonl`.
    pub fn append(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        let line = serde_json::to_string(self).map_err(|e| crate::Error::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_append() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::begin("generate", vec![("samples".into(), "3".into())], 7);
        m.finish(&[dir.path().join("meta")], "ok");
        m.append(dir.path()).unwrap();
        m.append(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: RunManifest = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.config, m.config);
    }
}
