//! Artifact bookkeeping: every output file gets a `<file>.meta.json`
//! sidecar carrying the hash of the configuration that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub stage: String,
    /// Wall-clock seconds of the producing stage.
    pub elapsed_secs: f64,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn write_meta(artifact: &Path, meta: &ArtifactMeta) -> Result<()> {
    let path = meta_path(artifact);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_meta(artifact: &Path) -> Result<ArtifactMeta> {
    let path = meta_path(artifact);
    if !artifact.exists() {
        return Err(Error::MissingArtifact(artifact.to_path_buf()));
    }
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Errors unless the artifact exists and was produced under `expected`.
/// With `force`, a hash mismatch is tolerated.
pub fn check(artifact: &Path, expected: &str, force: bool) -> Result<ArtifactMeta> {
    let meta = read_meta(artifact)?;
    if meta.config_hash != expected && !force {
        return Err(Error::ConfigHashMismatch {
            path: artifact.to_path_buf(),
            expected: expected.to_string(),
            found: meta.config_hash,
        });
    }
    Ok(meta)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("scores.csv");
        assert!(matches!(check(&a, "h", false), Err(Error::MissingArtifact(p)) if p == a));
        std::fs::write(&a, "x").unwrap();
        assert!(matches!(check(&a, "h", false), Err(Error::MissingArtifact(p)) if p.ends_with("scores.csv.meta.json")));
        let meta = ArtifactMeta { config_hash: "abc".into(), stage: "attack".into(), elapsed_secs: 1.5 };
        write_meta(&a, &meta).unwrap();
        assert_eq!(check(&a, "abc", false).unwrap(), meta);
        assert!(matches!(check(&a, "def", false), Err(Error::ConfigHashMismatch { .. })));
        assert_eq!(check(&a, "def", true).unwrap(), meta);
    }
}
