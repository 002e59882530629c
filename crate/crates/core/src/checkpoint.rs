//! Versioned checkpoint container: the full config echo plus every named
//! parameter tensor, as JSON (f64 values round-trip exactly).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "anypoint-checkpoint v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: AppConfig,
    params: ParamStore,
}

pub fn save_checkpoint(path: &Path, model: &Model, config: &AppConfig) -> Result<()> {
    debug_assert_eq!(config.model, model.cfg);
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        params: model.params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

/// Load a checkpoint: validates the format tag and that the stored tensors
/// exactly match the architecture implied by the stored config.
pub fn load_checkpoint(path: &Path) -> Result<(Model, AppConfig)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid_input(format!(
            "unsupported checkpoint format {:?}",
            ckpt.format
        )));
    }
    ckpt.config.validate()?;
    let skeleton = Model::new(&ckpt.config.model, 0)?;
    if skeleton.params.len() != ckpt.params.len() {
        return Err(Error::invalid_input(format!(
            "checkpoint has {} tensors, architecture expects {}",
            ckpt.params.len(),
            skeleton.params.len()
        )));
    }
    for (name, tensor) in skeleton.params.iter() {
        match ckpt.params.try_get(name) {
            Some(stored) if stored.shape == tensor.shape => {}
            Some(stored) => {
                return Err(Error::invalid_input(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    stored.shape, tensor.shape
                )));
            }
            None => {
                return Err(Error::invalid_input(format!(
                    "checkpoint is missing tensor {name}"
                )));
            }
        }
    }
    let model = Model { cfg: ckpt.config.model.clone(), params: ckpt.params };
    model.params.validate_finite()?;
    Ok((model, ckpt.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = AppConfig {
            model: ModelConfig { channels: 8, ffn_hidden: 16, ..Default::default() },
            ..Default::default()
        };
        let model = Model::new(&cfg.model, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &model, &cfg).unwrap();
        let (loaded, echo) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, model.params);
        assert_eq!(echo, cfg);
    }

    #[test]
    fn rejects_wrong_format_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\": \"other\", \"config\": {}, \"params\": {\"entries\": {}}}").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
