//! Run manifests: what a command read, what it wrote and with which settings.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use eatr_core::data::encode_feature_matrix;
use eatr_core::training::write_json_atomic;
use eatr_core::GroundingSample;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Streaming SHA-256 over command inputs.
#[derive(Default)]
pub struct InputHash {
    hasher: Sha256,
    inputs: Vec<String>,
}

impl InputHash {
    /// Hashes a file's bytes.
    pub fn file(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(&bytes);
        self.inputs.push(path.display().to_string());
        Ok(())
    }

    /// Hashes the annotations and the decoded features of a dataset.
    pub fn dataset(&mut self, annotations: &Path, samples: &[GroundingSample]) -> std::io::Result<()> {
        self.file(annotations)?;
        for s in samples {
            self.hasher.update(encode_feature_matrix(&s.video.valid_tokens()));
            self.hasher.update(encode_feature_matrix(&s.sentence.valid_tokens()));
        }
        Ok(())
    }

    /// Hashes an in-memory value, such as a generator configuration.
    pub fn value(&mut self, value: &Value) {
        self.hasher.update(value.to_string().as_bytes());
    }

    fn finish(self) -> (String, Vec<String>) {
        let digest = self.hasher.finalize();
        let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
        (hex, self.inputs)
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<String>,
    pub input_sha256: String,
    pub outputs: Vec<String>,
    pub started_unix_seconds: f64,
    pub wall_clock_seconds: f64,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    command: String,
    started: SystemTime,
    timer: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: SystemTime::now(),
            timer: Instant::now(),
        }
    }

    /// Writes the manifest to `path` through a temporary file.
    pub fn write(
        self,
        path: &Path,
        seed: Option<u64>,
        config: Value,
        hash: InputHash,
        outputs: &[PathBuf],
    ) -> eatr_core::Result<()> {
        let (input_sha256, inputs) = hash.finish();
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs,
            input_sha256,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix_seconds: self.started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            wall_clock_seconds: self.timer.elapsed().as_secs_f64(),
        };
        write_json_atomic(path, &manifest)
    }
}

/// Manifest path written next to an output file.
pub fn sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
