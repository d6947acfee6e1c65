//! The TOML run configuration shared by every command.
//!
//! ```toml
//! output_dir = "runs/desk"
//!
//! [dataset]
//! dir = "data/synth"      # falls back to $TIPSEG_DATA_DIR, then "data"
//! n_train = 1788
//! n_val = 224
//! n_test = 224
//!
//! [synth]                 # SynthConfig fields
//! [augment]               # preset plus optional overrides
//! preset = "full"
//! [model]
//! preset = "desk"
//! [train]                 # TrainConfig fields
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::imgdata::SynthConfig;
use crate::model::ModelSpec;
use crate::trainer::TrainConfig;

/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "TIPSEG_DATA_DIR";

/// File name of the frozen configuration inside a run directory.
pub const FROZEN_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: None,
            n_train: 1788,
            n_val: 224,
            n_test: 224,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// One of [`crate::model::spec::PRESETS`].
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            input_size: None,
            num_classes: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::preset(&self.preset)?;
        if let Some(s) = self.input_size {
            spec.input_size = s;
        }
        if let Some(c) = self.num_classes {
            spec.num_classes = c;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.model.spec()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Data root: the configured directory, else `$TIPSEG_DATA_DIR`, else `data`.
    pub fn data_dir(&self) -> PathBuf {
        self.dataset
            .dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Writes the fully expanded configuration to `dir/config.toml`.
    pub fn write_frozen(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(FROZEN_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
