use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewma::EwmaState;
use crate::policy::{add_grad_logprob, logprob_train, PolicyParams, Version, VersionedParams};
use crate::proxy::{alpha_from_gap, linear_prox_log, loglinear_prox, EffectiveBounds};
use crate::ratio::{mis_weight, AlphaRule, MisConfig, MisOutcome, ProxyForm, TokenSample, Variant};

use super::config::{AdvantageMode, SimConfig};

pub const ADVANTAGE_DELTA: f64 = 1e-6;

/// Per-trajectory advantages, group by group.
pub fn compute_advantages(rewards: &[f64], group_size: usize, mode: AdvantageMode) -> Result<Vec<f64>> {
    if group_size == 0 || rewards.len() % group_size != 0 {
        return Err(Error::config(format!(
            "{} rewards do not split into groups of {group_size}",
            rewards.len()
        )));
    }
    if mode == AdvantageMode::GroupNormalized && group_size < 2 {
        return Err(Error::config("group-normalized advantages need group_size >= 2"));
    }
    let mut out = Vec::with_capacity(rewards.len());
    for group in rewards.chunks(group_size) {
        let n = group.len() as f64;
        let mean = group.iter().sum::<f64>() / n;
        match mode {
            AdvantageMode::MeanCentered => out.extend(group.iter().map(|r| r - mean)),
            AdvantageMode::GroupNormalized => {
                let var = group.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
                let denom = var.sqrt() + ADVANTAGE_DELTA;
                out.extend(group.iter().map(|r| (r - mean) / denom));
            }
        }
    }
    Ok(out)
}

/// Outcome of one token inside a trainer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenOutcome {
    pub active: bool,
    pub clip_active: bool,
    pub mask_active: bool,
    pub weight: f64,
    pub gap: u64,
}

/// Aggregates of one trainer step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStats {
    pub tokens: u64,
    pub active_tokens: u64,
    pub clip_inactive: u64,
    pub disc_masked: u64,
    pub gap_sum: u64,
    pub max_gap: u64,
    pub reset: bool,
    pub outcomes: Vec<TokenOutcome>,
}

impl StepStats {
    pub fn mask_fraction(&self) -> f64 {
        frac(self.active_tokens, self.tokens)
    }

    pub fn clip_fraction(&self) -> f64 {
        frac(self.clip_inactive, self.tokens)
    }

    pub fn disc_masked_fraction(&self) -> f64 {
        frac(self.disc_masked, self.tokens)
    }

    pub fn mean_gap(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.gap_sum as f64 / self.tokens as f64
        }
    }
}

fn frac(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// The actor, its optional EWMA reference, and the update rule.
///
/// Shared by the asynchronous simulator and the synchronous reference loop.
#[derive(Debug, Clone)]
pub struct Trainer {
    mis: MisConfig,
    learning_rate: f64,
    auto_reset: bool,
    actor: Arc<VersionedParams>,
    ewma: Option<EwmaState>,
    low_rho_streak: u64,
}

impl Trainer {
    pub fn new(cfg: &SimConfig, theta0: PolicyParams) -> Result<Self> {
        let ewma = if cfg.mis.variant.uses_ewma() {
            let mut s = EwmaState::new(&theta0, cfg.ewma.beta, cfg.ewma.reset_threshold)?.with_form(cfg.ewma.form);
            s.version = 0;
            Some(s)
        } else {
            None
        };
        Ok(Self {
            mis: cfg.mis,
            learning_rate: cfg.learning_rate,
            auto_reset: cfg.ewma.auto_reset,
            actor: Arc::new(VersionedParams::new(0, theta0)),
            ewma,
            low_rho_streak: 0,
        })
    }

    pub fn version(&self) -> Version {
        self.actor.version
    }

    pub fn actor(&self) -> &Arc<VersionedParams> {
        &self.actor
    }

    pub fn ewma(&self) -> Option<&EwmaState> {
        self.ewma.as_ref()
    }

    pub fn reset_count(&self) -> u64 {
        self.ewma.as_ref().map_or(0, EwmaState::reset_count)
    }

    /// Consecutive steps with `rho_t` below the reset threshold.
    pub fn low_rho_streak(&self) -> u64 {
        self.low_rho_streak
    }

    /// Evaluates one token against the current actor.
    pub fn evaluate(&self, s: &TokenSample) -> Result<TokenOutcome> {
        let v = self.actor.version;
        if s.rollout_version > v {
            return Err(Error::Protocol(format!(
                "token from version {} is newer than the actor ({v})",
                s.rollout_version
            )));
        }
        let gap = v + 1 - s.rollout_version;
        let params = &self.actor.params;
        let logp_cur = logprob_train(params, s.context, s.token)?;
        let variant = self.mis.variant;
        let outcome: MisOutcome = match variant {
            Variant::PpoEwma | Variant::PpoEwmaTrainInfer => {
                let ewma = self.ewma.as_ref().expect("EWMA variant without state");
                let prox = logprob_train(ewma.theta_prox(), s.context, s.token)?;
                mis_weight(s, logp_cur, Some(prox), &self.mis)?
            }
            Variant::LinearProx | Variant::LinearProxTrainInfer => {
                let alpha = match self.mis.alpha {
                    AlphaRule::Fixed { alpha } => alpha,
                    AlphaRule::FromGap => alpha_from_gap(gap)?,
                };
                let prox = match self.mis.proxy_form {
                    ProxyForm::Arithmetic => linear_prox_log(s.logp_infer_old, logp_cur, alpha)?,
                    ProxyForm::LogLinear => loglinear_prox(s.logp_infer_old, logp_cur, alpha)?,
                };
                let mut out = mis_weight(s, logp_cur, Some(prox), &self.mis)?;
                if self.mis.reparameterize {
                    let bounds = EffectiveBounds::for_config(&self.mis, alpha)?;
                    let r_total = (logp_cur - s.logp_infer_old).exp();
                    out.active = bounds.admits(r_total, s.advantage, variant.role().masks_r2);
                }
                out
            }
            Variant::DecoupledAsync => mis_weight(s, logp_cur, Some(logp_cur), &self.mis)?,
            _ => mis_weight(s, logp_cur, None, &self.mis)?,
        };
        Ok(TokenOutcome {
            active: outcome.active,
            clip_active: outcome.clip_active,
            mask_active: outcome.mask_active,
            weight: outcome.weight,
            gap,
        })
    }

    /// One gradient pass over `batch`.
    ///
    /// `theta += lr / N * sum_active weight * grad log pi`, then the EWMA
    /// reference absorbs the new actor and may reset on this step's `rho_t`.
    /// Returns the new actor; the caller decides when to install it.
    pub fn compute_step(&self, batch: &[TokenSample]) -> Result<(PolicyParams, StepStats)> {
        let params = &self.actor.params;
        let mut grad = vec![0.0; params.weights().len()];
        let mut st = StepStats {
            outcomes: Vec::with_capacity(batch.len()),
            ..StepStats::default()
        };
        for s in batch {
            let o = self.evaluate(s)?;
            st.tokens += 1;
            st.gap_sum += o.gap;
            st.max_gap = st.max_gap.max(o.gap);
            if !o.clip_active {
                st.clip_inactive += 1;
            }
            if !o.mask_active {
                st.disc_masked += 1;
            }
            if o.active {
                st.active_tokens += 1;
                add_grad_logprob(params, s.context, s.token, o.weight, &mut grad)?;
            }
            st.outcomes.push(o);
        }
        let mut next = params.clone();
        if st.active_tokens > 0 {
            next.add_scaled(self.learning_rate / st.tokens as f64, &grad)?;
        }
        Ok((next, st))
    }

    /// Installs the actor produced by [`Trainer::compute_step`] and advances the reference.
    pub fn apply_step(&mut self, next: PolicyParams, stats: &mut StepStats) -> Result<Arc<VersionedParams>> {
        let version = self.actor.version + 1;
        let rho = stats.mask_fraction();
        if let Some(ewma) = self.ewma.as_mut() {
            ewma.update(&next)?;
            ewma.version = version;
            if rho < ewma.reset_threshold() {
                self.low_rho_streak += 1;
            } else {
                self.low_rho_streak = 0;
            }
            if self.auto_reset {
                stats.reset = ewma.maybe_reset(rho, &next)?;
            }
        }
        self.actor = Arc::new(VersionedParams::new(version, next));
        Ok(Arc::clone(&self.actor))
    }

    pub fn step(&mut self, batch: &[TokenSample]) -> Result<(Arc<VersionedParams>, StepStats)> {
        let (next, mut stats) = self.compute_step(batch)?;
        let actor = self.apply_step(next, &mut stats)?;
        Ok((actor, stats))
    }
}
