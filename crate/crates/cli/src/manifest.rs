//! Output directory bookkeeping and the run manifest.
//!
//! Every artifact goes through [`Artifacts`], which records its SHA-256.
//! The manifest lists those digests together with the config digest, the
//! effective seed and the tool versions. It deliberately omits timestamps
//! and the worker count so that repeated runs produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ArtifactEntry {
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub schema_version: u32,
    pub config_sha256: String,
    /// Digest of the configuration after overrides, as canonical JSON.
    pub effective_config_sha256: String,
    pub seed: u64,
    pub passed: bool,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes files into the output directory and remembers their digests.
pub struct Artifacts {
    dir: PathBuf,
    written: BTreeMap<String, ArtifactEntry>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.written.insert(
            name.to_string(),
            ArtifactEntry {
                bytes: bytes.len(),
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Renders into a buffer with `f` and writes the result.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> gelfand_smp::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn entries(&self) -> &BTreeMap<String, ArtifactEntry> {
        &self.written
    }

    pub fn finish(mut self, mut manifest: Manifest) -> Result<(), CliError> {
        manifest.artifacts = std::mem::take(&mut self.written);
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST_NAME);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn manifest_lists_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::create(dir.path()).unwrap();
        a.write("b.txt", b"hello").unwrap();
        a.write_json("a.json", &[1, 2]).unwrap();
        let manifest = Manifest {
            tool: "t",
            version: "0",
            subcommand: "x".into(),
            schema_version: 1,
            config_sha256: String::new(),
            effective_config_sha256: String::new(),
            seed: 4,
            passed: true,
            artifacts: BTreeMap::new(),
        };
        a.finish(manifest).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["artifacts"]["b.txt"]["sha256"], sha256_hex(b"hello"));
        assert!(v["artifacts"]["a.json"].is_object());
        assert_eq!(v["seed"], 4);
    }
}
