use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ratlesnet::metrics::DEFAULT_THRESHOLD;
use ratlesnet::model::{BlockType, ModelConfig, Variant};
use ratlesnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Model section: a named variant, optionally overridden field by field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<Variant>,
    pub levels: Option<usize>,
    pub encoder_width: Option<usize>,
    pub block_type: Option<BlockType>,
}

impl ModelSection {
    pub fn resolve(&self) -> ratlesnet::Result<ModelConfig> {
        let mut cfg = self.variant.unwrap_or(Variant::Baseline).config();
        if let Some(l) = self.levels {
            cfg.levels = l;
        }
        if let Some(w) = self.encoder_width {
            cfg = cfg.with_encoder_width(w);
        }
        if let Some(b) = self.block_type {
            cfg.block_type = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocSection {
    #[serde(default = "default_threshold")]
    pub threshold: usize,
}

fn default_threshold() -> usize {
    DEFAULT_THRESHOLD
}

impl Default for PostprocSection {
    fn default() -> Self {
        PostprocSection {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// The JSON run description shared by `train`, `summary` and `gradcheck`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub postproc: PostprocSection,
    #[serde(default)]
    pub paths: PathsSection,
}

/// Marks failures caused by the configuration rather than the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
        cfg.model.resolve()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}
