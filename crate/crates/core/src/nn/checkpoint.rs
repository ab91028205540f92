use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{MlpConfig, MlpParams};
use crate::container;
use crate::error::{Error, Result};

const KIND: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ScoreNet,
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: Role,
    pub seed: u64,
    pub step: u64,
    /// Number of diffusion steps the network was trained against, if any.
    #[serde(default)]
    pub schedule_steps: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    config: MlpConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: MlpParams,
}

impl Checkpoint {
    pub fn new(role: Role, net: MlpParams, seed: u64, step: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                role,
                seed,
                step,
                schedule_steps: None,
            },
            net,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            config: self.net.config().clone(),
        };
        container::encode(KIND, &header, &[self.net.params(), self.net.buffers()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut arrays): (Header, _) = container::load(path, KIND)?;
        if arrays.len() != 2 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected 2 arrays, found {}", arrays.len()),
            });
        }
        let buffers = arrays.pop().expect("two arrays");
        let params = arrays.pop().expect("two arrays");
        let net = MlpParams::from_parts(header.config, params, buffers).map_err(|e| {
            Error::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })?;
        Ok(Self {
            meta: header.meta,
            net,
        })
    }

    /// Load and require a specific role tag.
    pub fn load_role(path: &Path, role: Role) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.meta.role != role {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected a {role:?} checkpoint, found {:?}", ckpt.meta.role),
            });
        }
        Ok(ckpt)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> Result<String> {
        Ok(container::sha256_hex(&self.to_bytes()?))
    }
}
