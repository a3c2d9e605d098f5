//! Run manifests and report files.
//!
//! A report payload depends only on the inputs and flags; the manifest next
//! to it carries the non-reproducible bits (timing).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the input file bytes, hex encoded.
    pub input_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub config: serde_json::Value,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, input: &[u8], seed: u64, workers: usize, config: serde_json::Value) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            input_sha256: sha256_hex(input),
            seed,
            workers,
            config,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: 0.0,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Files written for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct WrittenReport {
    pub manifest: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Writes `<name>` for every `(name, contents)` pair plus `manifest.json`
/// into `dir`, creating it if needed.
pub fn write_report(dir: &Path, files: &[(String, String)], manifest: &RunManifest) -> Result<WrittenReport> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, contents) in files {
        let path = dir.join(name);
        fs::write(&path, contents)?;
        written.push(path);
    }
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, to_json_string(manifest)?)?;
    Ok(WrittenReport {
        manifest: manifest_path,
        files: written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn writes_payload_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("check", b"{}", 7, 2, serde_json::json!({"tol": 1e-9}));
        let w = write_report(dir.path(), &[("check.json".into(), "{}\n".into())], &m).unwrap();
        assert_eq!(fs::read_to_string(&w.files[0]).unwrap(), "{}\n");
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(&w.manifest).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
