// SPDX-License-Identifier: MIT OR Apache-2.0

//! Content-hash manifest for stage skipping.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_SCHEMA: &str = "factlab.manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// What a stage consumed and produced. Paths are relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            schema: MANIFEST_SCHEMA.into(),
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    /// Read `dir/manifest.json`, or start empty when there is none.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| {
            CliError::Core(factlab_core::Error::Format {
                path: path.clone(),
                detail: e.to_string(),
            })
        })?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(CliError::Core(factlab_core::Error::Format {
                path,
                detail: format!("expected schema {MANIFEST_SCHEMA}, found {}", m.schema),
            }));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))
    }

    /// True when `key` last ran with the same config and inputs and its
    /// outputs are still on disk unchanged.
    pub fn is_fresh(&self, dir: &Path, key: &str, want: &StageRecord) -> bool {
        let Some(rec) = self.stages.get(key) else {
            return false;
        };
        rec.config == want.config
            && rec.inputs == want.inputs
            && !rec.outputs.is_empty()
            && rec
                .outputs
                .iter()
                .all(|(p, h)| hash_file(&dir.join(p)).is_ok_and(|got| &got == h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn freshness_tracks_outputs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "one").unwrap();
        let mut rec = StageRecord {
            config: "c".into(),
            ..StageRecord::default()
        };
        rec.outputs.insert("a.txt".into(), sha256_hex(b"one"));
        let mut m = Manifest::default();
        m.stages.insert("s".into(), rec.clone());
        m.save(dir.path()).unwrap();
        let m = Manifest::load(dir.path()).unwrap();
        let want = StageRecord {
            outputs: Default::default(),
            ..rec.clone()
        };
        assert!(m.is_fresh(dir.path(), "s", &want));
        std::fs::write(dir.path().join("a.txt"), "two").unwrap();
        assert!(!m.is_fresh(dir.path(), "s", &want));
        let other = StageRecord {
            config: "d".into(),
            ..want
        };
        assert!(!m.is_fresh(dir.path(), "s", &other));
    }
}
