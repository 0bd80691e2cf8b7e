//! Model checkpoints as JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "gridcast-model/1";

/// Everything needed to rebuild a trained model. Floats are written with
/// round-trip precision, so loading restores every parameter bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub scaler: Scaler,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, scaler: Scaler) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            scaler,
            params: model.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint format {:?}",
                path.display(),
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }
}
