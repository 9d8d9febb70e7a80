//! Run manifests: every command that produces a run directory writes a
//! `manifest.json` recording the tool version, the fully resolved
//! configuration, seeds, wall-clock timings, and a SHA-256 digest of
//! every file it produced. The manifest itself is written atomically,
//! last, so its presence implies the listed files exist and verify.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;
use crate::io::{digest_file, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: Config,
    /// seconds per labeled phase, insertion order lost but names sorted
    pub timings_secs: BTreeMap<String, f64>,
    /// file name -> sha256 hex digest, for every produced file
    pub outputs: BTreeMap<String, String>,
    /// digest of the checkpoint the run produced or consumed, if any
    pub checkpoint_sha256: Option<String>,
}

/// Builder that accumulates outputs and timings during a command, then
/// digests and writes the manifest in one shot.
pub struct ManifestWriter {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
    phase: Option<(String, Instant)>,
}

impl ManifestWriter {
    pub fn new(dir: &Path, command: &str, config: Config) -> ManifestWriter {
        // carry over outputs an earlier command left in the same run
        // directory, so the manifest stays a complete inventory
        let (outputs, checkpoint_sha256) = std::fs::read_to_string(dir.join("manifest.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .map(|m| (m.outputs, m.checkpoint_sha256))
            .unwrap_or_default();
        ManifestWriter {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config,
                timings_secs: BTreeMap::new(),
                outputs,
                checkpoint_sha256,
            },
            started: Instant::now(),
            phase: None,
        }
    }

    /// Start timing a named phase; ends any phase already open.
    pub fn begin(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.to_string(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, at)) = self.phase.take() {
            let secs = at.elapsed().as_secs_f64();
            *self.manifest.timings_secs.entry(name).or_insert(0.0) += secs;
        }
    }

    /// Write a file into the run directory and record its digest.
    pub fn emit(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.manifest
            .outputs
            .insert(name.to_string(), digest_file(&path)?);
        Ok(path)
    }

    pub fn set_checkpoint_digest(&mut self, digest: String) {
        self.manifest.checkpoint_sha256 = Some(digest);
    }

    /// Finish: record total wall time and write `manifest.json`.
    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        self.end_phase();
        self.manifest
            .timings_secs
            .insert("total".to_string(), self.started.elapsed().as_secs_f64());
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(CliError::runtime)?;
        write_atomic(&self.dir.join("manifest.json"), json.as_bytes())?;
        Ok(self.manifest)
    }
}

/// Check every file a manifest lists against its recorded digest.
pub fn verify(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(CliError::runtime)?;
    for (name, want) in &manifest.outputs {
        let got = digest_file(&dir.join(name))?;
        if got != *want {
            return Err(CliError::Runtime(format!(
                "digest mismatch for {name}: manifest {want}, file {got}"
            )));
        }
    }
    Ok(manifest)
}
