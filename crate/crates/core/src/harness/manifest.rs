use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{file_checksum, write_atomic};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: PathBuf,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's config inputs and upstream fingerprints.
    pub fingerprint: String,
    pub status: StageStatus,
    pub artifacts: Vec<Artifact>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// A completed stage whose fingerprint matches and whose artifacts all
    /// exist with their recorded checksums.
    pub fn is_fresh(&self, dir: &Path, stage: &str, fingerprint: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.status == StageStatus::Done
            && rec.fingerprint == fingerprint
            && rec.artifacts.iter().all(|a| {
                file_checksum(&dir.join(&a.path)).is_ok_and(|c| c == a.checksum)
            })
    }

    pub fn fingerprint(&self, stage: &str) -> Option<&str> {
        self.stages
            .get(stage)
            .filter(|r| r.status == StageStatus::Done)
            .map(|r| r.fingerprint.as_str())
    }

    /// Every artifact referenced by a completed stage checksum-validates.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, rec) in &self.stages {
            if rec.status != StageStatus::Done {
                continue;
            }
            for a in &rec.artifacts {
                let p = dir.join(&a.path);
                let sum = file_checksum(&p)?;
                if sum != a.checksum {
                    return Err(Error::Corrupt {
                        path: p,
                        reason: format!("checksum mismatch for stage {name}"),
                    });
                }
            }
        }
        Ok(())
    }
}
