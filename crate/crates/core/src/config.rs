//! One TOML file configures a whole experiment. Every table is optional and
//! falls back to its defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::data::SyntheticConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::eval::MatchConfig;
use crate::pipeline::{DecodeConfig, LmTrainConfig};
use crate::roll::RollThresholds;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub codec: CodecConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub decoder: DecoderConfig,
    pub train: LmTrainConfig,
    pub decode: DecodeConfig,
    pub eval: MatchConfig,
    pub roll: RollThresholds,
    pub synthetic: SyntheticConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.eval.validate()?;
        self.roll.validate()?;
        self.synthetic.validate()?;
        if self.decoder.audio_dim != self.encoder.hidden_dim {
            return Err(Error::Config(format!(
                "decoder.audio_dim {} must equal encoder.hidden_dim {}",
                self.decoder.audio_dim, self.encoder.hidden_dim
            )));
        }
        Ok(())
    }
}
