//! JSON run configuration. Command-line flags override file values, which
//! override the built-in defaults.

use std::path::Path;

use gazeprophet_core::model::ModelDims;
use gazeprophet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ```json
/// { "model": { "vit": { ... }, "lstm_hidden": 16, "fused_dim": 24, "head_hidden": 12 },
///   "train": { "epochs": 20, "adam": { "lr": 0.0005 } } }
/// ```
/// Both sections are optional. `train` may be partial; `model`, when
/// present, must be complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ModelDims::desk")]
    pub model: ModelDims,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelDims::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// File contents, or the defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_train_section() {
        let cfg = RunConfig::parse(Path::new("c.json"), r#"{"train": {"epochs": 3, "adam": {"lr": 0.01}}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.train.adam.beta2, 0.999);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model, ModelDims::desk());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse(Path::new("c.json"), r#"{"trian": {}}"#).unwrap_err().to_string();
        assert!(err.contains("c.json") && err.contains("trian"), "{err}");
    }

    #[test]
    fn json_roundtrip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(Path::new("c"), &text).unwrap(), cfg);
    }
}
