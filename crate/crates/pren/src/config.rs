//! Run configuration: one JSON document describing the model, the
//! corpus, and the training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::CorpusConfig;
use crate::training::{LrSchedule, TrainConfig};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: CorpusConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data: CorpusConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        LrSchedule::new(self.train.lr_steps.clone())?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("epoch count must be >= 1".into()));
        }
        if self.data.max_len + 1 > self.model.max_len {
            return Err(Error::Config(format!(
                "corpus texts up to {} do not fit decoding length {} with ⟨eos⟩",
                self.data.max_len, self.model.max_len
            )));
        }
        if let Some(acc) = self.train.target_accuracy {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::Config(format!("target accuracy {acc} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::toy()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Override every seed from one value, as `--seed` does.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_json();
        let back = RunConfig::from_json_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"model":{"kind":"pren2d"}}"#).unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Pren2d);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn kind_names_match_the_cli_surface() {
        let cfg = RunConfig::default();
        assert!(cfg.to_json().contains(r#""kind":"pren""#));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        // texts too long for the decoding length
        let mut cfg = RunConfig::default();
        cfg.model.max_len = 8;
        cfg.data.max_len = 8;
        assert!(cfg.validate().is_err());

        // zero batch
        let mut cfg = RunConfig::default();
        cfg.train.batch_size = 0;
        assert!(cfg.validate().is_err());

        // head count not dividing feature width
        let mut cfg = RunConfig::default();
        cfg.model.kind = ModelKind::Pren2d;
        cfg.model.heads = 5;
        assert!(cfg.validate().is_err());

        // malformed JSON
        assert!(RunConfig::from_json_str("{not json").is_err());
    }

    #[test]
    fn seed_override_touches_both_streams() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(99);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.data.seed, 99);
    }
}
