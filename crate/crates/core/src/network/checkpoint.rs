use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Arch, NetworkError, RegModel};

pub const CHECKPOINT_FORMAT: &str = "elastoreg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {found} (supported: {CHECKPOINT_VERSION})")]
    Version { found: u64 },
    #[error("parameter slot `{name}`: {reason}")]
    Slot { name: String, reason: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    seed: u64,
    arch: Arch,
    params: Vec<ParamRecord>,
}

impl RegModel {
    /// JSON checkpoint. Floats use shortest round-trip formatting, so loading
    /// restores every parameter bit for bit.
    pub fn to_checkpoint_json(&self) -> String {
        let doc = Document {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            arch: self.arch.clone(),
            params: self
                .params
                .slots()
                .iter()
                .map(|s| ParamRecord {
                    name: s.name.clone(),
                    shape: [s.value.nrows(), s.value.ncols()],
                    data: s.value.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, CheckpointError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let version = raw
            .get("version")
            .ok_or_else(|| CheckpointError::Malformed("missing version field".into()))?
            .as_u64()
            .ok_or_else(|| CheckpointError::Malformed("version must be an integer".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(CheckpointError::Version { found: version });
        }
        let doc: Document =
            serde_json::from_value(raw).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Malformed(format!(
                "unknown format `{}`",
                doc.format
            )));
        }
        let mut model = RegModel::empty_like(&doc.arch, doc.seed)?;
        if doc.params.len() != model.params.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} parameter slots, architecture needs {}",
                doc.params.len(),
                model.params.len()
            )));
        }
        for rec in doc.params {
            let id = model
                .params
                .id_of(&rec.name)
                .ok_or_else(|| CheckpointError::Slot {
                    name: rec.name.clone(),
                    reason: "not part of this architecture".into(),
                })?;
            let expected = model.params.get(id).dim();
            if (rec.shape[0], rec.shape[1]) != expected {
                return Err(CheckpointError::Slot {
                    name: rec.name,
                    reason: format!("shape {:?}, expected {:?}", rec.shape, expected),
                });
            }
            let value =
                Array2::from_shape_vec(expected, rec.data).map_err(|e| CheckpointError::Slot {
                    name: rec.name.clone(),
                    reason: e.to_string(),
                })?;
            *model.params.get_mut(id) = value;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}
