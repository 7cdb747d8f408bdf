use std::fs;
use std::path::{Path, PathBuf};

use dbsfm::harness::CvConfig;
use dbsfm::model::ModelConfig;
use dbsfm::spectral::WelchConfig;
use dbsfm::synthgen::CohortConfig;
use dbsfm::tokenizer::{token_dim, TokenizerConfig};
use dbsfm::training::{FinetuneConfig, PretrainConfig};
use dbsfm::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory used when `--data` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub welch: WelchConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub synth: CohortConfig,
    pub cv: CvConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.welch.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let dim = token_dim(&self.welch);
        if self.model.input_dim != dim {
            return Err(Error::Config(format!(
                "model.input_dim is {} but the Welch settings produce {dim}-wide tokens",
                self.model.input_dim
            )));
        }
        if self.model.seq_positions < 2 {
            return Err(Error::Config("model.seq_positions must be at least 2".into()));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            tokens_per_sequence: self.model.tokens_per_sequence(),
            ..TokenizerConfig::default()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::Io { path, source: e })
    }
}
