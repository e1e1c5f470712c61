//! Experiment files: a model and a training setup in one TOML document.

use std::path::Path;

use cigt::presets;
use cigt::train::TrainConfig;
use cigt::trellis::TrellisConfig;
use cigt::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_dataset() -> String {
    "mnist".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    /// Dataset tag; reports on different tags cannot be compared.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default)]
    pub deterministic: bool,
    pub model: TrellisConfig,
    pub train: TrainConfig,
}

impl Experiment {
    pub fn from_preset(name: &str) -> Result<Self> {
        let (model, train) = presets::preset(name)?;
        let dataset = if name.starts_with("fashion") { "fashion-mnist" } else { "mnist" };
        Ok(Experiment { name: name.to_string(), dataset: dataset.to_string(), deterministic: false, model, train })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let exp: Experiment = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
