//! JSON run configuration.
//!
//! ```json
//! {
//!   "preset": "secvit-t",
//!   "model": { "stage_depths": [2, 2], "...": "..." },
//!   "train": { "epochs": 20, "batch_size": 32 }
//! }
//! ```
//!
//! `preset` and `model` are mutually exclusive; with neither, the toy model
//! is used. Unknown keys are rejected and errors carry the key path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainOptions;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainOptions,
}

impl RunConfig {
    /// The model to build, with defaults filled in.
    pub fn model_config(&self) -> Result<ModelConfig> {
        match (&self.preset, &self.model) {
            (Some(_), Some(_)) => Err(Error::Config {
                path: "preset".into(),
                message: "give either `preset` or `model`, not both".into(),
            }),
            (Some(p), None) => ModelConfig::preset(p).map_err(|e| Error::Config {
                path: "preset".into(),
                message: e.to_string(),
            }),
            (None, Some(m)) => {
                let mut m = m.clone();
                m.normalize().map_err(|e| Error::Config {
                    path: "model".into(),
                    message: e.to_string(),
                })?;
                Ok(m)
            }
            (None, None) => Ok(ModelConfig::toy()),
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    cfg.model_config()?;
    cfg.train.validate().map_err(|e| Error::Config {
        path: "train".into(),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
