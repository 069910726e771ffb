//! Run configuration: one TOML table per module. Every key has a default and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::UpdateRule;
use crate::cdo::{TrackerRule, UpdateSign, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::lcw::IndicatorSource;
use crate::math::binary_entropy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub cdo: CdoConfig,
    pub lcw: LcwConfig,
    pub dme: DmeConfig,
    pub engine: EngineSection,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdoConfig {
    /// Tracker smoothing factor.
    pub alpha: f64,
    /// The confidence threshold is `Entropy([p, 1 − p])` for this `p`.
    pub epsilon_p: f64,
    /// Explicit threshold in nats; overrides `epsilon_p` when set.
    pub epsilon: Option<f64>,
    /// Ridge added to the confusion matrix before solving.
    pub lambda: f64,
    pub update_sign: UpdateSign,
    pub tracker_rule: TrackerRule,
    /// One tracker per ensemble member instead of one shared tracker.
    pub per_member_trackers: bool,
}

impl Default for CdoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon_p: 0.7,
            epsilon: None,
            lambda: DEFAULT_LAMBDA,
            update_sign: UpdateSign::Plus,
            tracker_rule: TrackerRule::Ema,
            per_member_trackers: false,
        }
    }
}

impl CdoConfig {
    pub fn resolved_epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| binary_entropy(self.epsilon_p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcwConfig {
    /// Consistency threshold on the L2 gap to the neighborhood mean.
    pub beta: f64,
    pub indicator_source: IndicatorSource,
}

impl Default for LcwConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            indicator_source: IndicatorSource::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmeConfig {
    /// One ensemble member per learning rate.
    pub learning_rates: Vec<f64>,
    pub update_rule: UpdateRule,
    /// Blend of the previous member weights into the new ones; 0 disables.
    pub weight_smoothing: f64,
}

impl Default for DmeConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-5, 5e-4, 1e-4],
            update_rule: UpdateRule::GradientDescent,
            weight_smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ftat,
    NoAdapt,
    EntropyMin,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ftat => "ftat",
            Method::NoAdapt => "no_adapt",
            Method::EntropyMin => "entropy_min",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub method: Method,
    /// Rows per batch when the stream is a single CSV file.
    pub batch_size: usize,
    pub steps_per_batch: usize,
    /// Learning rate of the single learner in the entropy-minimization baseline.
    pub entropy_min_lr: f64,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            method: Method::Ftat,
            batch_size: 512,
            steps_per_batch: 1,
            entropy_min_lr: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub update_rule: UpdateRule,
    /// Fraction of rows held out for model selection; 0 keeps the last epoch.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 0.05,
            update_rule: UpdateRule::GradientDescent,
            holdout_fraction: 0.15,
            seed: 0,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that does not depend on the number of classes.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let c = &self.cdo;
        if !(0.0..=1.0).contains(&c.alpha) {
            return bad(format!("cdo.alpha must be in [0, 1], got {}", c.alpha));
        }
        if c.epsilon.is_none() && !(c.epsilon_p > 0.0 && c.epsilon_p < 1.0) {
            return bad(format!("cdo.epsilon_p must be in (0, 1), got {}", c.epsilon_p));
        }
        if !(c.lambda >= 0.0 && c.lambda.is_finite()) {
            return bad(format!("cdo.lambda must be >= 0, got {}", c.lambda));
        }
        if !(self.lcw.beta >= 0.0 && self.lcw.beta.is_finite()) {
            return bad(format!("lcw.beta must be >= 0, got {}", self.lcw.beta));
        }
        let d = &self.dme;
        if d.learning_rates.is_empty() {
            return bad("dme.learning_rates must not be empty".into());
        }
        if let Some(lr) = d.learning_rates.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return bad(format!("dme.learning_rates entries must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&d.weight_smoothing) {
            return bad(format!("dme.weight_smoothing must be in [0, 1), got {}", d.weight_smoothing));
        }
        if self.engine.batch_size == 0 {
            return bad("engine.batch_size must be >= 1".into());
        }
        if !(self.engine.entropy_min_lr > 0.0 && self.engine.entropy_min_lr.is_finite()) {
            return bad(format!("engine.entropy_min_lr must be positive, got {}", self.engine.entropy_min_lr));
        }
        if self.backbone.hidden.contains(&0) {
            return bad("backbone.hidden sizes must be >= 1".into());
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be >= 1".into());
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.holdout_fraction) {
            return bad(format!("train.holdout_fraction must be in [0, 1), got {}", t.holdout_fraction));
        }
        for rule in [d.update_rule, t.update_rule] {
            if let UpdateRule::Momentum { momentum } = rule {
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("momentum must be in [0, 1), got {momentum}"));
                }
            }
        }
        Ok(())
    }

    /// Engine settings for a `k`-class problem.
    pub fn engine_config(&self, k: usize) -> Result<EngineConfig> {
        self.validate()?;
        let epsilon = self.cdo.resolved_epsilon();
        let ln_k = (k as f64).ln();
        if !(epsilon > 0.0 && epsilon < ln_k) {
            return Err(Error::Config(format!(
                "confidence threshold {epsilon} must be in (0, ln {k} = {ln_k})"
            )));
        }
        Ok(EngineConfig {
            method: self.engine.method,
            alpha: self.cdo.alpha,
            epsilon,
            beta: self.lcw.beta,
            update_sign: self.cdo.update_sign,
            tracker_rule: self.cdo.tracker_rule,
            lambda: self.cdo.lambda,
            per_member_trackers: self.cdo.per_member_trackers,
            indicator_source: self.lcw.indicator_source,
            learning_rates: self.dme.learning_rates.clone(),
            update_rule: self.dme.update_rule,
            weight_smoothing: self.dme.weight_smoothing,
            steps_per_batch: self.engine.steps_per_batch,
            entropy_min_lr: self.engine.entropy_min_lr,
        })
    }
}

/// Resolved adaptation settings for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub method: Method,
    pub alpha: f64,
    /// Confidence threshold in nats.
    pub epsilon: f64,
    pub beta: f64,
    pub update_sign: UpdateSign,
    pub tracker_rule: TrackerRule,
    pub lambda: f64,
    pub per_member_trackers: bool,
    pub indicator_source: IndicatorSource,
    pub learning_rates: Vec<f64>,
    pub update_rule: UpdateRule,
    pub weight_smoothing: f64,
    pub steps_per_batch: usize,
    pub entropy_min_lr: f64,
}

impl EngineConfig {
    pub fn defaults(k: usize) -> Result<Self> {
        Config::default().engine_config(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_testing_setup() {
        let c = Config::default();
        assert_eq!(c.cdo.alpha, 0.1);
        assert!((c.cdo.resolved_epsilon() - 0.6108643020548935).abs() < 1e-15);
        assert_eq!(c.lcw.beta, 0.3);
        assert_eq!(c.engine.batch_size, 512);
        assert_eq!(c.dme.learning_rates, [1e-5, 5e-4, 1e-4]);
        assert_eq!(c.engine.steps_per_batch, 1);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml_str("[cdo]\nalpah = 0.2\n").is_err());
        assert!(Config::from_toml_str("[cdoo]\n").is_err());
        assert!(Config::from_toml_str("typo = 1\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = Config::default();
        c.cdo.update_sign = UpdateSign::Minus;
        c.cdo.epsilon = Some(0.5);
        c.dme.update_rule = UpdateRule::Momentum { momentum: 0.9 };
        c.engine.method = Method::EntropyMin;
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejects_out_of_range_values() {
        for text in [
            "[cdo]\nalpha = 1.5\n",
            "[cdo]\nupdate_sign = 0\n",
            "[lcw]\nbeta = -1.0\n",
            "[dme]\nlearning_rates = []\n",
            "[dme]\nlearning_rates = [0.0]\n",
            "[engine]\nbatch_size = 0\n",
            "[engine]\nmethod = \"tent\"\n",
            "[train]\nholdout_fraction = 1.0\n",
        ] {
            assert!(Config::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn epsilon_must_sit_below_ln_k() {
        let mut c = Config::default();
        c.cdo.epsilon = Some(0.7);
        assert!(c.engine_config(2).is_err());
        assert!(c.engine_config(3).is_ok());
    }
}
