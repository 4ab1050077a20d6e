//! Flat TOML configuration for preprocessing, model shape and training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitMode;
use crate::error::{invalid, io_err, HimError, Result};
use crate::reorg::SessionBoundaries;

/// Which behavior representation feeds the scoring MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Sum-pooled recent positive item embeddings.
    Base,
    /// Session pyramid only: the self-attended session vectors go straight to the MLP.
    Ubp,
    /// Session pyramid plus group clustering, fused by target attention.
    Him,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Ubp, Variant::Him];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "BaseModel",
            Variant::Ubp => "BaseModel+UBP",
            Variant::Him => "HIM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "basemodel" => Ok(Variant::Base),
            "ubp" | "basemodel+ubp" => Ok(Variant::Ubp),
            "him" => Ok(Variant::Him),
            _ => Err(invalid("variant", s.to_string())),
        }
    }
}

/// Every knob. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HimConfig {
    pub variant: Variant,
    pub sessions: SessionBoundaries,
    /// Positive items kept per session.
    pub top_n: usize,
    /// Negative items kept per session.
    pub top_n_negative: usize,
    pub embedding_dim: usize,
    /// Embedding tables start uniform in `[-embedding_init, embedding_init]`.
    pub embedding_init: f64,
    pub gru_hidden: usize,
    /// Group count k.
    pub groups: usize,
    pub group_dim: usize,
    /// Other users drawn from the batch per anchor session in the group loss.
    pub negative_users: usize,
    /// Output widths of the scoring MLP; the last must be 2.
    pub mlp_dims: Vec<usize>,
    /// Group-loss weight. Unset: 0.0001 without real negatives, 0.1 with.
    pub alpha: Option<f64>,
    /// Skip negative feedback in the pyramid. Unset: follows whether the data has real negatives.
    pub positive_only: Option<bool>,
    /// Compute the group loss at all. `false` drops it from the objective entirely.
    pub group_loss: bool,
    pub tie_session_attention: bool,
    pub stop_grad_pz: bool,
    /// Recent positives pooled by the base variant.
    pub base_history_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub min_user_positives: usize,
    pub min_item_users: usize,
    pub negative_ratio: usize,
    pub split: SplitMode,
    /// Users with fewer positives are tailed.
    pub tailed_below: usize,
    /// Users with more positives are head.
    pub head_above: usize,
    pub repetitions: usize,
    pub eval_batch_size: usize,
}

impl Default for HimConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Him,
            sessions: SessionBoundaries::standard(),
            top_n: 5,
            top_n_negative: 5,
            embedding_dim: 8,
            embedding_init: 0.05,
            gru_hidden: 8,
            groups: 5,
            group_dim: 16,
            negative_users: 5,
            mlp_dims: vec![256, 128, 32, 2],
            alpha: None,
            positive_only: None,
            group_loss: true,
            tie_session_attention: false,
            stop_grad_pz: false,
            base_history_len: 50,
            lr: 1e-3,
            batch_size: 256,
            epochs: 10,
            patience: 3,
            clip_norm: 5.0,
            seed: 0,
            min_user_positives: 1,
            min_item_users: 5,
            negative_ratio: 5,
            split: SplitMode::RandomByUser,
            tailed_below: 3,
            head_above: 5,
            repetitions: 5,
            eval_batch_size: 1024,
        }
    }
}

impl HimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HimError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HimError::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("top_n", self.top_n),
            ("top_n_negative", self.top_n_negative),
            ("embedding_dim", self.embedding_dim),
            ("gru_hidden", self.gru_hidden),
            ("groups", self.groups),
            ("group_dim", self.group_dim),
            ("negative_users", self.negative_users),
            ("base_history_len", self.base_history_len),
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("negative_ratio", self.negative_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid("config", format!("{name} must be at least 1")));
            }
        }
        if self.mlp_dims.last() != Some(&2) || self.mlp_dims.contains(&0) {
            return Err(invalid(
                "config",
                "mlp_dims must be positive and end with 2",
            ));
        }
        if self.alpha.is_some_and(|a| !(a >= 0.0 && a.is_finite())) {
            return Err(invalid("config", "alpha must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.embedding_init > 0.0) {
            return Err(invalid(
                "config",
                "lr, clip_norm and embedding_init must be positive",
            ));
        }
        if self.tailed_below > self.head_above + 1 {
            return Err(invalid(
                "config",
                "tailed_below must not exceed head_above + 1",
            ));
        }
        if self.variant == Variant::Him && self.group_loss && self.batch_size <= self.negative_users
        {
            return Err(invalid("config", "batch_size must exceed negative_users"));
        }
        Ok(())
    }

    pub fn resolved_positive_only(&self, has_real_negatives: bool) -> bool {
        self.positive_only.unwrap_or(!has_real_negatives)
    }

    pub fn resolved_alpha(&self, has_real_negatives: bool) -> f64 {
        self.alpha
            .unwrap_or(if has_real_negatives { 0.1 } else { 0.0001 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(HimConfig::from_toml("").unwrap(), HimConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = HimConfig::default();
        c.alpha = Some(0.5);
        c.variant = Variant::Ubp;
        c.sessions = SessionBoundaries::parse(&["7d", "all"]).unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(HimConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(HimConfig::from_toml("mlp_dims = [8, 3]").is_err());
        assert!(HimConfig::from_toml("alpha = -1.0").is_err());
        assert!(HimConfig::from_toml("unknown_key = 1").is_err());
        assert!(HimConfig::from_toml("sessions = [\"6m\", \"14d\"]").is_err());
    }

    #[test]
    fn alpha_defaults_follow_negatives() {
        let c = HimConfig::default();
        assert_eq!(c.resolved_alpha(false), 0.0001);
        assert_eq!(c.resolved_alpha(true), 0.1);
        assert!(c.resolved_positive_only(false));
    }
}
