//! Checkpoints: one JSON document holding the model dimensions, base-model
//! tag, hypernetwork parameters, optimizer state, and training metadata.
//! Floats round-trip exactly; saving a loaded checkpoint reproduces the
//! file byte for byte.

use anyhow::{bail, Context, Result};
use mtds::learn::AdamState;
use mtds::model::{BaseModel, HyperNetParams, ModelDims};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::fsio;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs_completed: usize,
    /// Next Sobol index of the particle stream (MCO training).
    pub sobol_index: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub dims: ModelDims,
    pub base: BaseModel,
    pub phi: HyperNetParams,
    pub adam: Option<AdamState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing checkpoint {}", path.display()))?;
        if ckpt.schema_version != SCHEMA_VERSION {
            bail!(
                "{}: checkpoint schema {} unsupported (expected {})",
                path.display(),
                ckpt.schema_version,
                SCHEMA_VERSION
            );
        }
        ckpt.phi
            .check_dims(ckpt.dims, ckpt.base)
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        Ok(ckpt)
    }
}
