//! Staged output files and run manifests.
//!
//! Every output is first written to a temporary file beside its destination and
//! only moved into place once the whole command has succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

pub struct Staging {
    files: Vec<(NamedTempFile, PathBuf)>,
    /// Directory to create at commit time, for commands that write into a fresh directory.
    create_dir: Option<PathBuf>,
}

impl Staging {
    pub fn new() -> Self {
        Self {
            files: Vec::new(),
            create_dir: None,
        }
    }

    /// Stage files for `dir`, which is created on commit if missing. Its parent must exist.
    pub fn for_dir(dir: &Path) -> CliResult<Self> {
        let parent = parent_of(dir);
        if !parent.is_dir() {
            return Err(CliError::usage(anyhow::anyhow!(
                "output directory parent {} does not exist",
                parent.display()
            )));
        }
        Ok(Self {
            files: Vec::new(),
            create_dir: Some(dir.to_path_buf()),
        })
    }

    /// Reserve a temporary path that becomes `dest` on commit.
    pub fn stage(&mut self, dest: &Path) -> CliResult<PathBuf> {
        let temp_dir = match &self.create_dir {
            Some(dir) if dest.starts_with(dir) => parent_of(dir),
            _ => parent_of(dest),
        };
        let tmp = tempfile::Builder::new()
            .prefix(".stgnf-")
            .tempfile_in(&temp_dir)
            .with_context(|| format!("cannot stage output {}", dest.display()))
            .map_err(CliError::usage)?;
        let path = tmp.path().to_path_buf();
        self.files.push((tmp, dest.to_path_buf()));
        Ok(path)
    }

    pub fn write_bytes(&mut self, dest: &Path, bytes: &[u8]) -> CliResult<()> {
        let tmp = self.stage(dest)?;
        fs::write(&tmp, bytes)
            .with_context(|| format!("writing {}", dest.display()))
            .map_err(CliError::runtime)
    }

    pub fn write_json<T: Serialize>(&mut self, dest: &Path, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
        text.push('\n');
        self.write_bytes(dest, text.as_bytes())
    }

    /// Hashes of the staged files, keyed by their final paths.
    pub fn hashes(&self) -> CliResult<BTreeMap<String, String>> {
        self.files
            .iter()
            .map(|(tmp, dest)| Ok((dest.display().to_string(), sha256_file(tmp.path())?)))
            .collect()
    }

    /// Moves every staged file into place, then writes the manifest last.
    pub fn commit(self, manifest: Option<(&Path, &RunManifest)>) -> CliResult<()> {
        let manifest_tmp = match manifest {
            Some((dest, m)) => {
                let dir = parent_of(dest);
                let mut tmp = match &self.create_dir {
                    Some(d) if dest.starts_with(d) => tempfile::Builder::new()
                        .prefix(".stgnf-")
                        .tempfile_in(parent_of(d)),
                    _ => tempfile::Builder::new().prefix(".stgnf-").tempfile_in(&dir),
                }
                .map_err(CliError::usage)?;
                let text = serde_json::to_string_pretty(m).map_err(CliError::runtime)?;
                tmp.write_all(text.as_bytes())
                    .and_then(|_| tmp.write_all(b"\n"))
                    .map_err(CliError::runtime)?;
                Some((tmp, dest.to_path_buf()))
            }
            None => None,
        };
        if let Some(dir) = &self.create_dir {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(CliError::usage)?;
        }
        for (tmp, dest) in self.files.into_iter().chain(manifest_tmp) {
            tmp.persist(&dest)
                .with_context(|| format!("moving output into {}", dest.display()))
                .map_err(CliError::runtime)?;
        }
        Ok(())
    }
}

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::usage)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Sibling path `<dir>/<stem>.<suffix>`, e.g. `scores.csv` -> `scores.detections.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub duration_secs: f64,
    pub version: String,
}

impl RunManifest {
    pub fn build(
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: &[&Path],
        staging: &Staging,
        started: Instant,
    ) -> CliResult<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<CliResult<_>>()?;
        Ok(Self {
            command: command.to_string(),
            config,
            seed,
            inputs,
            outputs: staging.hashes()?,
            duration_secs: started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}
