//! CSV and manifest writers. Every CSV starts with a `# config_hash=...`
//! comment line so artifacts from different configs cannot be mixed
//! silently; rows are plain UTF-8 with LF endings and floats in Rust's
//! shortest round-trip formatting, which keeps reruns byte-identical.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub struct CsvWriter {
    lines: Vec<String>,
}

impl CsvWriter {
    pub fn new(config_hash: &str, header: &[&str]) -> Self {
        CsvWriter {
            lines: vec![format!("# config_hash={config_hash}"), header.join(",")],
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.lines.push(fields.join(","));
    }

    pub fn write(&self, path: &Path) -> Result<(), String> {
        let mut out = self.lines.join("\n");
        out.push('\n');
        std::fs::write(path, out)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))
    }
}

/// Formats a float for CSV output (shortest round-trip form).
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub command: String,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub struct ManifestBuilder {
    config_hash: String,
    command: String,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(config_hash: &str, command: &str) -> Self {
        ManifestBuilder {
            config_hash: config_hash.to_string(),
            command: command.to_string(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Verifies every recorded file exists, then writes `manifest.json`.
    pub fn finish(self, out_dir: &Path) -> Result<PathBuf, String> {
        for path in &self.outputs {
            if !path.exists() {
                return Err(format!("manifest lists missing file {}", path.display()));
            }
        }
        let manifest = RunManifest {
            config_hash: self.config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| format!("manifest serialization failed: {e}"))?;
        let mut file = std::fs::File::create(&path)
            .map_err(|e| format!("cannot create {}: {e}", path.display()))?;
        file.write_all(json.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| format!("cannot write manifest: {e}"))?;
        Ok(path)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir)
        .map_err(|e| format!("cannot create output directory {}: {e}", dir.display()))
}
