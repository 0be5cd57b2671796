//! Run manifests: what ran, with which configuration, over which exact
//! input and output bytes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Input paths as given on the command line.
    pub inputs: Vec<FileDigest>,
    /// Output paths relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigestMismatch {
    pub path: String,
    pub expected: String,
    pub actual: Option<String>,
}

pub fn digest_file(path: &Path) -> Result<FileDigest, ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(path).map_err(io)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), ManifestError> {
        self.inputs.push(digest_file(path)?);
        Ok(())
    }

    /// Records `name` inside `out_dir`.
    pub fn add_output(&mut self, out_dir: &Path, name: &str) -> Result<(), ManifestError> {
        let mut d = digest_file(&out_dir.join(name))?;
        d.path = name.to_string();
        self.outputs.push(d);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, ManifestError> {
        let path = out_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| ManifestError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ManifestError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Recomputes every digest. Outputs resolve against `manifest_dir`,
    /// inputs against the working directory.
    pub fn verify(&self, manifest_dir: &Path) -> Vec<DigestMismatch> {
        let check = |recorded: &FileDigest, path: PathBuf| {
            let actual = digest_file(&path).ok().map(|d| d.sha256);
            (actual.as_deref() != Some(recorded.sha256.as_str())).then(|| DigestMismatch {
                path: path.display().to_string(),
                expected: recorded.sha256.clone(),
                actual,
            })
        };
        self.inputs
            .iter()
            .filter_map(|d| check(d, PathBuf::from(&d.path)))
            .chain(
                self.outputs
                    .iter()
                    .filter_map(|d| check(d, manifest_dir.join(&d.path))),
            )
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        let d = digest_file(&p).unwrap();
        assert_eq!(
            d.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(d.bytes, 3);
    }

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("out.txt"), b"hello").unwrap();
        let mut m = RunManifest::new("test", Some(3), serde_json::json!({"k": 1}));
        m.add_output(dir.path(), "out.txt").unwrap();
        let path = m.write(dir.path()).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.verify(dir.path()).is_empty());
        fs::write(dir.path().join("out.txt"), b"hullo").unwrap();
        assert_eq!(back.verify(dir.path()).len(), 1);
    }
}
