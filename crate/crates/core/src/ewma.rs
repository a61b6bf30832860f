//! Exponentially weighted reference parameters with staleness-aware decay and auto-reset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Version};

/// Recursion used to fold a new actor state into the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EwmaForm {
    /// `w' = 1 + beta w`, `theta' = theta_t / w' + beta (w / w') theta`.
    #[default]
    Normalized,
    /// `theta' = beta theta + (1 - beta) theta_t`.
    Unnormalized,
}

/// Reference-policy state owned by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmaState {
    theta_prox: PolicyParams,
    cum_weight: f64,
    beta: f64,
    step: u64,
    reset_count: u64,
    reset_threshold: f64,
    form: EwmaForm,
    /// Version of the most recent actor state folded in.
    pub version: Version,
}

/// Center of mass `beta / (1 - beta)` of the stationary EWMA history.
pub fn ewma_center_of_mass(beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(beta / (1.0 - beta))
}

/// Decay `W / (W + 2)` that puts the center of mass at the middle of a staleness window `W`.
pub fn staleness_decay(window: f64) -> Result<f64> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(Error::domain(format!("staleness window must be positive, got {window}")));
    }
    Ok(window / (window + 2.0))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::domain(format!("beta must lie in (0, 1), got {beta}")));
    }
    Ok(())
}

impl EwmaState {
    /// State with no history; the first update copies its argument exactly.
    pub fn empty(num_contexts: usize, vocab_size: usize, beta: f64, reset_threshold: f64) -> Result<Self> {
        check_beta(beta)?;
        if !(reset_threshold > 0.0 && reset_threshold < 1.0) {
            return Err(Error::domain(format!(
                "reset threshold must lie in (0, 1), got {reset_threshold}"
            )));
        }
        Ok(Self {
            theta_prox: PolicyParams::zeros(num_contexts, vocab_size),
            cum_weight: 0.0,
            beta,
            step: 0,
            reset_count: 0,
            reset_threshold,
            form: EwmaForm::Normalized,
            version: 0,
        })
    }

    /// State initialized from `theta0` (one update applied, `w = 1`).
    pub fn new(theta0: &PolicyParams, beta: f64, reset_threshold: f64) -> Result<Self> {
        let (nc, vs) = theta0.shape();
        let mut state = Self::empty(nc, vs, beta, reset_threshold)?;
        state.update(theta0)?;
        Ok(state)
    }

    pub fn with_form(mut self, form: EwmaForm) -> Self {
        self.form = form;
        self
    }

    pub fn theta_prox(&self) -> &PolicyParams {
        &self.theta_prox
    }

    pub fn cum_weight(&self) -> f64 {
        self.cum_weight
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn reset_count(&self) -> u64 {
        self.reset_count
    }

    pub fn reset_threshold(&self) -> f64 {
        self.reset_threshold
    }

    pub fn form(&self) -> EwmaForm {
        self.form
    }

    /// Folds the actor state `theta_t` into the reference.
    pub fn update(&mut self, theta_t: &PolicyParams) -> Result<()> {
        self.theta_prox.check_shape(theta_t)?;
        let beta = self.beta;
        let w_prev = self.cum_weight;
        let w = 1.0 + beta * w_prev;
        let (a, b) = if w_prev == 0.0 {
            (1.0, 0.0)
        } else {
            match self.form {
                EwmaForm::Normalized => (1.0 / w, beta * (w_prev / w)),
                EwmaForm::Unnormalized => (1.0 - beta, beta),
            }
        };
        for (p, t) in self.theta_prox.weights_mut().iter_mut().zip(theta_t.weights()) {
            *p = if b == 0.0 { *t } else { a * t + b * *p };
        }
        self.cum_weight = w;
        self.step += 1;
        Ok(())
    }

    /// Re-centers on `theta_t` when `rho_t < tau`. Returns whether a reset happened.
    pub fn maybe_reset(&mut self, rho_t: f64, theta_t: &PolicyParams) -> Result<bool> {
        self.theta_prox.check_shape(theta_t)?;
        if rho_t < self.reset_threshold {
            self.theta_prox = theta_t.clone();
            self.cum_weight = 1.0;
            self.reset_count += 1;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn to_checkpoint(&self) -> EwmaCheckpoint {
        EwmaCheckpoint {
            format: EWMA_FORMAT.to_string(),
            version: self.version,
            step: self.step,
            cum_weight: self.cum_weight,
            beta: self.beta,
            reset_threshold: self.reset_threshold,
            reset_count: self.reset_count,
            form: self.form,
            num_contexts: self.theta_prox.num_contexts(),
            vocab_size: self.theta_prox.vocab_size(),
            params: self.theta_prox.weights().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: EwmaCheckpoint) -> Result<Self> {
        if ck.format != EWMA_FORMAT {
            return Err(Error::config(format!("unsupported EWMA checkpoint format `{}`", ck.format)));
        }
        check_beta(ck.beta)?;
        Ok(Self {
            theta_prox: PolicyParams::from_weights(ck.num_contexts, ck.vocab_size, ck.params)?,
            cum_weight: ck.cum_weight,
            beta: ck.beta,
            step: ck.step,
            reset_count: ck.reset_count,
            reset_threshold: ck.reset_threshold,
            form: ck.form,
            version: ck.version,
        })
    }

    /// Writes the checkpoint as pretty-printed JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let ck: EwmaCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_checkpoint(ck)
    }
}

pub const EWMA_FORMAT: &str = "asyncmis-ewma/1";

/// Text checkpoint of an [`EwmaState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwmaCheckpoint {
    pub format: String,
    pub version: Version,
    pub step: u64,
    pub cum_weight: f64,
    pub beta: f64,
    pub reset_threshold: f64,
    pub reset_count: u64,
    pub form: EwmaForm,
    pub num_contexts: usize,
    pub vocab_size: usize,
    pub params: Vec<f64>,
}

/// Functional form of [`EwmaState::update`].
pub fn ewma_update(mut state: EwmaState, theta_t: &PolicyParams) -> Result<EwmaState> {
    state.update(theta_t)?;
    Ok(state)
}

/// Functional form of [`EwmaState::maybe_reset`].
pub fn maybe_reset(mut state: EwmaState, rho_t: f64, theta_t: &PolicyParams) -> Result<EwmaState> {
    state.maybe_reset(rho_t, theta_t)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> PolicyParams {
        PolicyParams::from_weights(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn first_update_copies() {
        let theta0 = PolicyParams::random(2, 3, 1.0, 4);
        let s = EwmaState::new(&theta0, 0.75, 0.9).unwrap();
        assert_eq!(s.theta_prox(), &theta0);
        assert_eq!(s.cum_weight(), 1.0);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn two_point_sequence() {
        let mut s = EwmaState::new(&scalar(0.0), 0.5, 0.9).unwrap();
        s.update(&scalar(1.0)).unwrap();
        assert!((s.theta_prox().weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.cum_weight() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn constant_sequence_is_fixed_point() {
        let theta = PolicyParams::random(2, 2, 3.0, 8);
        let mut s = EwmaState::new(&theta, 0.9, 0.9).unwrap();
        for _ in 0..30 {
            s.update(&theta).unwrap();
            for (a, b) in s.theta_prox().weights().iter().zip(theta.weights()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_of_mass_and_decay() {
        assert_eq!(ewma_center_of_mass(0.5).unwrap(), 1.0);
        assert_eq!(ewma_center_of_mass(0.75).unwrap(), 3.0);
        assert!(ewma_center_of_mass(1e-12).unwrap() < 1e-11);
        assert!(ewma_center_of_mass(1.0).is_err());
        assert_eq!(staleness_decay(2.0).unwrap(), 0.5);
        assert_eq!(staleness_decay(6.0).unwrap(), 0.75);
        assert!(staleness_decay(0.0).is_err());
    }

    #[test]
    fn reset_rule() {
        let theta0 = scalar(0.0);
        let theta_t = scalar(5.0);
        let mut s = EwmaState::new(&theta0, 0.75, 0.9).unwrap();
        s.update(&scalar(1.0)).unwrap();
        let before = s.clone();
        assert!(!s.maybe_reset(0.95, &theta_t).unwrap());
        assert_eq!(s, before);
        assert!(!s.maybe_reset(0.90, &theta_t).unwrap());
        assert_eq!(s, before);
        assert!(s.maybe_reset(0.85, &theta_t).unwrap());
        assert_eq!(s.theta_prox(), &theta_t);
        assert_eq!(s.cum_weight(), 1.0);
        assert_eq!(s.reset_count(), 1);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = EwmaState::new(&PolicyParams::zeros(2, 2), 0.5, 0.9).unwrap();
        assert!(matches!(s.update(&PolicyParams::zeros(2, 3)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unnormalized_form() {
        let mut s = EwmaState::new(&scalar(0.0), 0.5, 0.9).unwrap().with_form(EwmaForm::Unnormalized);
        s.update(&scalar(1.0)).unwrap();
        assert_eq!(s.theta_prox().weights()[0], 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = EwmaState::new(&PolicyParams::random(3, 4, 1.0, 1), 0.6, 0.8).unwrap();
        s.update(&PolicyParams::random(3, 4, 1.0, 2)).unwrap();
        s.version = 7;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ewma.json");
        s.save(&path).unwrap();
        assert_eq!(EwmaState::load(&path).unwrap(), s);
    }
}
