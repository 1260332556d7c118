//! Run configuration: one TOML file holding every stage's settings.
//!
//! Missing fields take the published defaults. The fully resolved config is
//! echoed into each run directory before a stage starts.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use pcqa_core::backbone::BackboneConfig;
use pcqa_core::finetune::FinetuneConfig;
use pcqa_core::pretrain::PretrainConfig;
use pcqa_core::views::ViewConfig;

/// A configuration or usage problem. Reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<pcqa_core::Error> for ConfigError {
    fn from(e: pcqa_core::Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Kfold,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub protocol: Protocol,
    /// Number of k-fold repetitions; ignored for holdout.
    pub folds: usize,
    /// `[train, test]` for k-fold, `[train, val, test]` for holdout.
    pub ratio: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Kfold,
            folds: 5,
            ratio: vec![7, 2],
        }
    }
}

impl SplitConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let want = match self.protocol {
            Protocol::Kfold => 2,
            Protocol::Holdout => 3,
        };
        if self.ratio.len() != want {
            return Err(ConfigError(format!(
                "config field `split.ratio`: {:?} protocol needs {want} parts, got {}",
                self.protocol,
                self.ratio.len()
            )));
        }
        if self.ratio.iter().any(|&r| r == 0) {
            return Err(ConfigError(
                "config field `split.ratio`: parts must be positive".into(),
            ));
        }
        if self.protocol == Protocol::Kfold && self.folds == 0 {
            return Err(ConfigError(
                "config field `split.folds`: must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub view: ViewConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub split: SplitConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self::from_toml(&text)?)
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate("backbone")?;
        self.view.validate("view")?;
        self.pretrain.validate("pretrain")?;
        self.finetune
            .validate("finetune", self.backbone.encoder.width)?;
        self.split.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}
