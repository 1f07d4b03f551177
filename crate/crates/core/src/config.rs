//! Run configuration: every hyperparameter, validated at load time.

use serde::{Deserialize, Serialize};

use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::memory::RoutingMarginConfig;
use crate::merge::MergeConfig;

/// Correctness scoring mode for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Exact-match question answering: score is the 0/1 match indicator.
    Qa,
    /// Perplexity-based: score is 1/PPL of the target continuation,
    /// clamped to [0, 1].
    Hallucination,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelSizes {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusSettings {
    /// Edit stream length N; also the number of locality pairs.
    pub n_edits: usize,
    pub rephrases_per_fact: usize,
    /// Tokens in a fact key.
    pub key_len: usize,
    /// Tokens in a fact object.
    pub target_len: usize,
    /// Full-parameter pretraining passes over the locality facts.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoutingSettings {
    pub k_shards: usize,
    pub mask_ratio: f64,
    /// Routing threshold. None means calibrate from data after warm-up:
    /// the midpoint between the max locality score and min edit score.
    pub epsilon: Option<f64>,
    pub margins: RoutingMarginConfig,
    /// Weight of the routing margin loss in the total objective.
    pub lambda_act: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeedbackSettings {
    /// Correctness scores at or below this count as failures.
    pub tau_correct: f64,
    /// Per-shard error rate above which pruning triggers.
    pub tau_prune: f64,
    /// Pool size above which pruning triggers.
    pub tau_e: usize,
    /// Global re-trigger budget.
    pub max_iter: usize,
    /// Scale of the Gaussian noise a pruned shard restarts from.
    pub sigma_init: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Learning rate for masked shard updates (and the naive arm).
    pub edit_lr: f64,
    /// Gradient steps per batch per edit cycle.
    pub steps_per_batch: usize,
    /// Weight of the KD loss in the total objective.
    pub lambda_kd: f64,
    /// Residual re-batching attempts before a sample is treated as a
    /// presumptive failure.
    pub max_recluster_rounds: u32,
}

/// Full experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelSizes,
    pub corpus: CorpusSettings,
    pub routing: RoutingSettings,
    pub kd: KdConfig,
    pub feedback: FeedbackSettings,
    pub merge: MergeConfig,
    pub train: TrainSettings,
}

pub const CONFIG_SCHEMA: &str = "repair-config/v1";

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: CONFIG_SCHEMA.to_string(),
            seed: 0,
            mode: Mode::Qa,
            model: ModelSizes { vocab_size: 64, hidden_dim: 32, ffn_dim: 64 },
            corpus: CorpusSettings {
                n_edits: 30,
                rephrases_per_fact: 2,
                key_len: 3,
                target_len: 2,
                pretrain_steps: 800,
                pretrain_lr: 0.02,
            },
            routing: RoutingSettings {
                k_shards: 8,
                mask_ratio: 0.20,
                epsilon: None,
                margins: RoutingMarginConfig { gamma1: 2.0, gamma2: 20.0, gamma: 10.0, tau: 10.0 },
                lambda_act: 1.0,
            },
            kd: KdConfig {
                lambda_cos: 0.20,
                theta_var: 1.0,
                eps_cons: 0.6,
                temperature: 0.0,
                batch_size: 4,
            },
            feedback: FeedbackSettings {
                tau_correct: 0.85,
                tau_prune: 0.8,
                tau_e: 60,
                max_iter: 10_000,
                sigma_init: 0.01,
            },
            merge: MergeConfig { alpha: 1.0, merge_cadence: 30 },
            train: TrainSettings {
                edit_lr: 0.02,
                steps_per_batch: 500,
                lambda_kd: 1.0,
                max_recluster_rounds: 3,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unknown config schema {:?}, expected {CONFIG_SCHEMA:?}",
                self.schema
            )));
        }
        let m = &self.model;
        if m.vocab_size < 16 || m.hidden_dim == 0 || m.ffn_dim == 0 {
            return Err(Error::InvalidConfig(
                "model sizes must be positive with vocab_size >= 16".into(),
            ));
        }
        let c = &self.corpus;
        if c.n_edits == 0 {
            return Err(Error::InvalidConfig("n_edits must be >= 1".into()));
        }
        if c.rephrases_per_fact == 0 {
            return Err(Error::InvalidConfig("rephrases_per_fact must be >= 1".into()));
        }
        if c.key_len == 0 || c.target_len == 0 {
            return Err(Error::InvalidConfig("key_len and target_len must be >= 1".into()));
        }
        if !(c.pretrain_lr > 0.0 && c.pretrain_lr.is_finite()) {
            return Err(Error::InvalidConfig("pretrain_lr must be finite and > 0".into()));
        }
        let r = &self.routing;
        if r.k_shards == 0 {
            return Err(Error::InvalidConfig("k_shards must be >= 1".into()));
        }
        if !(r.mask_ratio > 0.0 && r.mask_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_ratio must be in (0, 1], got {}",
                r.mask_ratio
            )));
        }
        if let Some(eps) = r.epsilon {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(Error::InvalidConfig("epsilon must be finite and >= 0".into()));
            }
        }
        r.margins.validate()?;
        if r.lambda_act < 0.0 {
            return Err(Error::InvalidConfig("lambda_act must be >= 0".into()));
        }
        self.kd.validate()?;
        let f = &self.feedback;
        if !(f.tau_correct > 0.0 && f.tau_correct < 1.0) {
            return Err(Error::InvalidConfig("tau_correct must be in (0, 1)".into()));
        }
        if !(f.tau_prune > 0.0 && f.tau_prune <= 1.0) {
            return Err(Error::InvalidConfig("tau_prune must be in (0, 1]".into()));
        }
        if f.sigma_init < 0.0 {
            return Err(Error::InvalidConfig("sigma_init must be >= 0".into()));
        }
        self.merge.validate()?;
        let t = &self.train;
        if !(t.edit_lr > 0.0 && t.edit_lr.is_finite()) {
            return Err(Error::InvalidConfig("edit_lr must be finite and > 0".into()));
        }
        if t.steps_per_batch == 0 {
            return Err(Error::InvalidConfig("steps_per_batch must be >= 1".into()));
        }
        if t.lambda_kd < 0.0 {
            return Err(Error::InvalidConfig("lambda_kd must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_mask_ratio_rejected() {
        let mut cfg = RunConfig::default();
        cfg.routing.mask_ratio = 0.0;
        assert!(cfg.validate().is_err());
        cfg.routing.mask_ratio = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_margins_rejected() {
        let mut cfg = RunConfig::default();
        cfg.routing.margins.gamma2 = cfg.routing.margins.gamma1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_json_pretty().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.routing.k_shards, cfg.routing.k_shards);
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(RunConfig::from_json("{not json").is_err());
        assert!(RunConfig::from_json("{\"schema\": \"bogus/v9\"}").is_err());
    }
}
