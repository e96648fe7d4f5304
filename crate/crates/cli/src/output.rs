//! Atomic file output and run manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| {
        CliError::runtime(format!(
            "cannot create a temporary file in {}: {e}",
            dir.display()
        ))
    })?;
    tmp.write_all(bytes)
        .and_then(|()| tmp.flush())
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        InputDigest {
            path: path.display().to_string(),
            sha256: format!("{:x}", Sha256::digest(bytes)),
        }
    }
}

/// Everything needed to reproduce a run. Contains no timestamps so that
/// identical runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub schema_version: u32,
    pub command: &'static str,
    pub toolkit_version: &'static str,
    pub seed: Option<u64>,
    pub config: C,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &'static str, seed: Option<u64>, config: C) -> Self {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command,
            toolkit_version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Writes `<primary>.manifest.json`.
    pub fn write_beside(&self, primary: &Path) -> CliResult<PathBuf> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        write_json(&path, self)?;
        Ok(path)
    }
}
