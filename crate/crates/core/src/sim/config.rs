use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionStrategy, CostModel};
use crate::error::{Error, Result};
use crate::ewma::EwmaForm;
use crate::policy::DiscrepancyModel;
use crate::ratio::MisConfig;

/// Seeded sim-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencyDist {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
}

impl LatencyDist {
    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            LatencyDist::Constant { value } => value.is_finite() && value >= 0.0,
            LatencyDist::Uniform { low, high } => low.is_finite() && high.is_finite() && 0.0 <= low && low <= high,
            LatencyDist::Exponential { mean } => mean.is_finite() && mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid {name} distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LatencyDist::Constant { value } => value,
            LatencyDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            LatencyDist::Exponential { mean } => -mean * (1.0 - rng.random::<f64>()).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `(R - mean) / (std + 1e-6)` within each group, population std.
    #[default]
    GroupNormalized,
    /// `R - mean` within each group.
    MeanCentered,
}

/// What the trainer does with a token whose required `pi_old` is unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Error,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwmaConfig {
    pub beta: f64,
    pub reset_threshold: f64,
    pub auto_reset: bool,
    pub form: EwmaForm,
}

impl Default for EwmaConfig {
    fn default() -> Self {
        Self {
            beta: 0.75,
            reset_threshold: 0.9,
            auto_reset: true,
            form: EwmaForm::Normalized,
        }
    }
}

/// Simulator configuration.
///
/// `batch_size` counts trajectories; each rollout job produces one group of
/// `group_size` trajectories sharing a prompt. The version gap of a token is
/// `version after the update - rollout_version`, so on-policy data has gap 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_workers: usize,
    pub max_version_gap: u64,
    /// Time of one decode step for a whole group.
    pub rollout_latency: LatencyDist,
    pub update_latency: LatencyDist,
    pub batch_size: usize,
    pub group_size: usize,
    pub partial_rollout: bool,
    pub strategy: AcquisitionStrategy,
    pub mis: MisConfig,
    pub learning_rate: f64,
    pub total_updates: u64,
    pub seed: u64,
    pub discrepancy: DiscrepancyModel,
    pub ewma: EwmaConfig,
    pub advantage: AdvantageMode,
    pub cost: CostModel,
    pub max_resident: usize,
    /// Overlap the dedicated model's old-logit pass with the actor update.
    pub dedicated_overlap: bool,
    pub on_missing_old_logit: MissingPolicy,
    /// Scale of the random initial weights; 0 starts from the uniform policy.
    pub init_scale: f64,
    /// Record events, trajectories and per-token outcomes.
    pub trace: bool,
    /// Recompute every acquired `pi_old` from the archived parameters and count mismatches.
    pub audit: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_workers: 8,
            max_version_gap: 3,
            rollout_latency: LatencyDist::Uniform { low: 0.5, high: 1.5 },
            update_latency: LatencyDist::Constant { value: 2.0 },
            batch_size: 16,
            group_size: 4,
            partial_rollout: false,
            strategy: AcquisitionStrategy::None,
            mis: MisConfig::default(),
            learning_rate: 1.0,
            total_updates: 200,
            seed: 0,
            discrepancy: DiscrepancyModel::none(),
            ewma: EwmaConfig::default(),
            advantage: AdvantageMode::GroupNormalized,
            cost: CostModel::default(),
            max_resident: 5,
            dedicated_overlap: true,
            on_missing_old_logit: MissingPolicy::Error,
            init_scale: 0.0,
            trace: false,
            audit: false,
        }
    }
}

impl SimConfig {
    pub fn groups_per_batch(&self) -> usize {
        self.batch_size / self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_workers", self.num_workers),
            ("batch_size", self.batch_size),
            ("group_size", self.group_size),
            ("max_resident", self.max_resident),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.max_version_gap < 1 {
            return Err(Error::config("max_version_gap must be at least 1"));
        }
        if self.total_updates < 1 {
            return Err(Error::config("total_updates must be positive"));
        }
        if self.batch_size % self.group_size != 0 {
            return Err(Error::config(format!(
                "batch_size {} is not divisible by group_size {}",
                self.batch_size, self.group_size
            )));
        }
        if self.advantage == AdvantageMode::GroupNormalized && self.group_size < 2 {
            return Err(Error::config("group-normalized advantages need group_size >= 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive and finite"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::config("init_scale must be finite and non-negative"));
        }
        if self.strategy == AcquisitionStrategy::PartialInterrupt && !self.partial_rollout {
            return Err(Error::config("strategy partial_interrupt requires partial_rollout = true"));
        }
        let e = &self.ewma;
        if !(e.beta > 0.0 && e.beta < 1.0) {
            return Err(Error::config(format!("ewma.beta must lie in (0, 1), got {}", e.beta)));
        }
        if !(e.reset_threshold > 0.0 && e.reset_threshold < 1.0) {
            return Err(Error::config("ewma.reset_threshold must lie in (0, 1)"));
        }
        self.rollout_latency.validate("rollout_latency")?;
        self.update_latency.validate("update_latency")?;
        self.mis.validate()?;
        self.discrepancy.validate()?;
        self.cost.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: SimConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases: Vec<Box<dyn Fn(&mut SimConfig)>> = vec![
            Box::new(|c| c.max_version_gap = 0),
            Box::new(|c| c.batch_size = 10),
            Box::new(|c| c.learning_rate = 0.0),
            Box::new(|c| c.strategy = AcquisitionStrategy::PartialInterrupt),
            Box::new(|c| c.group_size = 1),
            Box::new(|c| c.ewma.beta = 1.0),
        ];
        for f in cases {
            let mut cfg = SimConfig::default();
            f(&mut cfg);
            assert!(cfg.validate().unwrap_err().is_config_error());
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(toml::from_str::<SimConfig>("num_workerz = 3").is_err());
    }

    #[test]
    fn latency_samples_stay_in_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let d = LatencyDist::Uniform { low: 1.0, high: 2.0 };
        for _ in 0..1000 {
            let x = d.sample(&mut rng);
            assert!((1.0..=2.0).contains(&x));
        }
        assert!(LatencyDist::Exponential { mean: 1.0 }.sample(&mut rng) >= 0.0);
    }
}
