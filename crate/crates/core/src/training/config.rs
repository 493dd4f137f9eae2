use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::rng::content_hash;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Linear,
}

/// How Q(h, z) is read for a soft policy label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QInputMode {
    /// Expectation of the Q vector under the label.
    Expected,
    /// Q at the label's most probable code.
    Argmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
}

/// Resolved optimisation settings of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Pretrain,
    Stage1,
    Stage2,
    Stage3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub num_codes: usize,
    #[serde(rename = "T")]
    pub policy_tokens: usize,
    #[serde(rename = "L")]
    pub pformer_layers: usize,
    pub d: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub generator_layers: usize,
    pub head_hidden: usize,
    pub max_seq_len: usize,

    pub tau_expectile: f64,
    pub tau_awr: f64,
    pub exp_clip: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eta: f64,

    pub batch_size: usize,
    pub epochs_per_stage: usize,
    pub learning_rate: f64,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub q_input_mode: QInputMode,
    pub freeze_codebook_after_stage1: bool,

    pub pretrain: StageOverrides,
    pub stage1: StageOverrides,
    pub stage2: StageOverrides,
    pub stage3: StageOverrides,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            num_codes: m.num_codes,
            policy_tokens: m.policy_tokens,
            pformer_layers: m.pformer_layers,
            d: m.latent_dim,
            d_model: m.width,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            generator_layers: m.generator_layers,
            head_hidden: m.head_hidden,
            max_seq_len: m.max_seq_len,
            tau_expectile: 0.7,
            tau_awr: 1.0,
            exp_clip: 20.0,
            gamma: 0.999,
            delta: 0.1,
            eta: 0.6,
            batch_size: 8,
            epochs_per_stage: 5,
            learning_rate: 1e-3,
            scheduler: Scheduler::Linear,
            seed: 0,
            q_input_mode: QInputMode::Expected,
            freeze_codebook_after_stage1: true,
            pretrain: StageOverrides::default(),
            stage1: StageOverrides::default(),
            stage2: StageOverrides::default(),
            stage3: StageOverrides::default(),
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_codes: self.num_codes,
            policy_tokens: self.policy_tokens,
            pformer_layers: self.pformer_layers,
            latent_dim: self.d,
            width: self.d_model,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            generator_layers: self.generator_layers,
            head_hidden: self.head_hidden,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} is outside (0, 1)")))
            }
        };
        open_unit("tau_expectile", self.tau_expectile)?;
        open_unit("gamma", self.gamma)?;
        if !(self.tau_awr >= 0.0 && self.tau_awr.is_finite()) {
            return Err(Error::config("tau_awr", "must be a finite value >= 0"));
        }
        if !(self.exp_clip > 0.0 && self.exp_clip.is_finite()) {
            return Err(Error::config("exp_clip", "must be positive"));
        }
        if !self.delta.is_finite() {
            return Err(Error::config("delta", "must be finite"));
        }
        if !self.eta.is_finite() {
            return Err(Error::config("eta", "must be finite"));
        }
        for (name, o) in self.overrides() {
            let s = self.resolve(o);
            if s.batch_size == 0 {
                return Err(Error::config(format!("{name}.batch_size"), "must be at least 1"));
            }
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::config(format!("{name}.learning_rate"), "must be positive"));
            }
        }
        Ok(())
    }

    fn overrides(&self) -> [(&'static str, &StageOverrides); 4] {
        [("pretrain", &self.pretrain), ("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)]
    }

    fn resolve(&self, o: &StageOverrides) -> StageSettings {
        StageSettings {
            batch_size: o.batch_size.unwrap_or(self.batch_size),
            epochs: o.epochs.unwrap_or(self.epochs_per_stage),
            learning_rate: o.learning_rate.unwrap_or(self.learning_rate),
        }
    }

    pub fn stage(&self, stage: TrainStage) -> StageSettings {
        let o = match stage {
            TrainStage::Pretrain => &self.pretrain,
            TrainStage::Stage1 => &self.stage1,
            TrainStage::Stage2 => &self.stage2,
            TrainStage::Stage3 => &self.stage3,
        };
        self.resolve(o)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        content_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Parses JSON or TOML text; an empty document yields the defaults.
    pub fn parse(text: &str, toml_format: bool) -> Result<Self> {
        let cfg: TrainConfig = if text.trim().is_empty() {
            TrainConfig::default()
        } else if toml_format {
            toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))?
        } else {
            serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).unwrap_or("<toml>").to_string()
}

/// Loads a config file; the format follows the extension (`.toml`, otherwise JSON).
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let toml_format = path.extension().is_some_and(|e| e == "toml");
    TrainConfig::parse(&text, toml_format)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = TrainConfig::parse("", true).unwrap();
        assert_eq!((c.num_codes, c.policy_tokens, c.pformer_layers), (24, 8, 6));
        assert_eq!(c, TrainConfig::parse("{}", false).unwrap());
    }

    #[test]
    fn range_errors_name_the_field() {
        let err = TrainConfig::parse("tau_expectile = 1.5", true).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "tau_expectile"), "{err}");
        assert!(TrainConfig::parse("gamma = 1.0", true).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::parse("learning_rat = 0.1", true).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(TrainConfig::parse(r#"{"stage2": {"epoch": 3}}"#, false).is_err());
    }

    #[test]
    fn persuasion_threshold_and_overrides() {
        let c = TrainConfig::parse("delta = -1.1\nK = 12\n[stage2]\nepochs = 2\n", true).unwrap();
        assert_eq!(c.delta, -1.1);
        assert_eq!(c.num_codes, 12);
        assert_eq!(c.stage(TrainStage::Stage2).epochs, 2);
        assert_eq!(c.stage(TrainStage::Stage3).epochs, 5);
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }
}
