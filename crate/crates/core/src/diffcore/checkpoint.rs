use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model snapshot: layer shapes and parameters plus the epoch index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(epoch: usize, model: Model) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            config_hash: None,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint".into(),
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        // re-run shape validation on deserialized layers
        let model = Model::new(ck.model.layers().to_vec())?;
        Ok(Checkpoint { model, ..ck })
    }
}
