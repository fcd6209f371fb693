use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NetworkParams;
use crate::error::{FlareError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub selection_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Parameters plus provenance, stored as one JSON document:
/// `{spec, encoder, decoder, classifier, metadata}` with row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(flatten)]
    pub params: NetworkParams,
    pub metadata: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(params: NetworkParams, metadata: CheckpointMeta) -> Self {
        Checkpoint { params, metadata }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.params.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| FlareError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FlareError::io(path, e))?;
        Self::from_json(&text)
    }
}
