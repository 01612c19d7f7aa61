//! Run manifests: enough to re-run a command and check its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, exactly as parsed.
    pub argv: Vec<String>,
    /// Absolute input paths with their digests.
    pub inputs: Vec<FileDigest>,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub software_version: String,
    /// Output files relative to the output directory.
    pub outputs: Vec<FileDigest>,
    /// Seconds; informational only.
    pub wall_clock: f64,
    pub threads: usize,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_input(path: &Path) -> CliResult<FileDigest> {
    let abs = std::fs::canonicalize(path).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    Ok(FileDigest {
        sha256: sha256_file(&abs)?,
        path: abs.display().to_string(),
    })
}

/// Collects output files written into one directory.
pub struct OutputDir {
    pub dir: PathBuf,
    written: Vec<FileDigest>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path.display().to_string(), e))?;
        self.written.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn finish(self, mut manifest: RunManifest) -> CliResult<PathBuf> {
        manifest.outputs = self.written;
        let path = self.dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path.display().to_string(), e))?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(&path.display().to_string(), e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Precondition(format!("{}: at '{}': {}", path.display(), e.path(), e.inner())))
}

/// Current rayon thread count.
pub fn threads() -> usize {
    rayon::current_num_threads()
}
