//! Run manifests: every command records digests of what it read and what it
//! wrote, so downstream commands can refuse stale inputs and a full run is
//! auditable after the fact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Digest-relevant bytes of an artifact. Training logs carry a wall-clock
/// column that differs between otherwise identical runs, so their digest is
/// taken over the log with that column removed; every other file hashes
/// as-is.
pub fn stable_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    let raw = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if path.file_name().and_then(|n| n.to_str()) == Some("training_log.csv") {
        let text = String::from_utf8_lossy(&raw);
        let stripped: Vec<&str> = text
            .lines()
            .map(|line| line.rsplit_once(',').map(|(head, _)| head).unwrap_or(line))
            .collect();
        return Ok((stripped.join("\n") + "\n").into_bytes());
    }
    Ok(raw)
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String, CliError> {
    Ok(digest_bytes(&stable_bytes(path)?))
}

/// Provenance record for one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Digest of the fully resolved (file + flag) configuration.
    pub config_hash: String,
    /// Digests of files the command read, keyed by file name.
    pub input_hashes: BTreeMap<String, String>,
    /// Digests of files the command wrote, keyed by file name.
    pub artifacts: BTreeMap<String, String>,
    /// Wall time of the run; excluded from digests and comparisons.
    pub wall_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config_hash,
            input_hashes: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            wall_ms: 0,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.input_hashes
            .insert(file_name(path), digest_file(path)?);
        Ok(())
    }

    pub fn record_artifact(&mut self, path: &Path) -> Result<(), CliError> {
        self.artifacts.insert(file_name(path), digest_file(path)?);
        Ok(())
    }

    /// Path of the manifest this command writes into `outdir`.
    pub fn path_for(outdir: &Path, command: &str) -> PathBuf {
        outdir.join(format!("manifest-{command}.json"))
    }

    pub fn save(&self, outdir: &Path) -> Result<(), CliError> {
        let name = self
            .command
            .split_whitespace()
            .next()
            .expect("nonempty command");
        let path = Self::path_for(outdir, name);
        atomic_write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::MissingUpstream(path.display().to_string()));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
    }

    /// Checks that `path` still has the digest this manifest recorded for
    /// it when it was written.
    pub fn verify_artifact(&self, path: &Path) -> Result<(), CliError> {
        if !path.exists() {
            return Err(CliError::MissingUpstream(path.display().to_string()));
        }
        let name = file_name(path);
        let recorded = self.artifacts.get(&name).ok_or_else(|| {
            CliError::Artifact(format!(
                "manifest for `{}` does not list {name}",
                self.command
            ))
        })?;
        let actual = digest_file(path)?;
        if *recorded != actual {
            return Err(CliError::Stale {
                what: name,
                expected: recorded.clone(),
                actual,
            });
        }
        Ok(())
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Write-then-rename so readers never observe a half-written artifact.
pub fn atomic_write(path: &Path, content: impl AsRef<[u8]>) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content.as_ref()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Loads the manifest of whichever corpus-producing command ran in
/// `outdir` (synth or ingest).
pub fn upstream_corpus_manifest(outdir: &Path) -> Result<RunManifest, CliError> {
    for cmd in ["synth", "ingest"] {
        let path = RunManifest::path_for(outdir, cmd);
        if path.exists() {
            return RunManifest::load(&path);
        }
    }
    Err(CliError::MissingUpstream(format!(
        "{} has neither manifest-synth.json nor manifest-ingest.json",
        outdir.display()
    )))
}
