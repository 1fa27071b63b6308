//! Run configuration: one JSON file with per-module sections, schema-checked
//! before any command runs, hashed into every output for reproducibility.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::act::ActModelConfig;
use crate::error::{Error, Result};
use crate::gqpo::GqpoConfig;
use crate::iql::IqlConfig;
use crate::sim::EpisodeConfig;
use crate::think::ThinkBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Return-to-go reweight w used when assembling training targets.
    pub rtg_w: f64,
    pub seed: u64,
}

impl Default for ActTrainConfig {
    fn default() -> Self {
        Self { steps: 2_000, batch_size: 16, lr: 1e-3, rtg_w: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThinkConfig {
    pub backend: ThinkBackend,
    /// Per-step decision deadline for asynchronous CoT collection.
    pub deadline_ms: u64,
    pub hallucination_tol: f64,
}

impl Default for ThinkConfig {
    fn default() -> Self {
        Self { backend: ThinkBackend::ScriptedOracle, deadline_ms: 1_000, hallucination_tol: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Inference-time return-to-go reweight (penalty term fixed to 1).
    pub rtg_w: f64,
    pub use_cot: bool,
    /// Force every CoT direction to INCREASE or DECREASE; empty = no override.
    pub instruction_override: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            seed: 0,
            rtg_w: 0.0,
            use_cot: true,
            instruction_override: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_periods: usize,
    pub behavior_policies: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_periods: 50,
            behavior_policies: vec![
                "random-walk".into(),
                "noisy-pid".into(),
                "constraint-aware".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulator: EpisodeConfig,
    pub data: DataConfig,
    pub act_model: ActModelConfig,
    pub act_train: ActTrainConfig,
    pub iql: IqlConfig,
    pub think: ThinkConfig,
    pub gqpo: GqpoConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        self.act_model.validate()?;
        self.iql.validate()?;
        self.gqpo.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        match self.eval.instruction_override.as_str() {
            "" | "INCREASE" | "DECREASE" => {}
            other => {
                return Err(Error::Config(format!(
                    "instruction_override must be INCREASE, DECREASE, or empty; got '{other}'"
                )))
            }
        }
        if self.data.num_periods == 0 || self.data.behavior_policies.is_empty() {
            return Err(Error::Config("data section needs periods and policies".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable digest of the canonical JSON form, embedded in outputs.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"simulater": {}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn bad_override_rejected() {
        let mut cfg = RunConfig::default();
        cfg.eval.instruction_override = "HOLD".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.simulator.rng_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
