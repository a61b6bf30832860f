//! Per-token importance ratios and the masked importance sampling (MIS) family.
//!
//! Every variant is expressed by two ratios: `r1`, the update/staleness ratio
//! that PPO clipping acts on, and `r2`, the discrepancy or proxy-reference
//! ratio. A variant's role decides whether `r2` is masked, used as a weight,
//! or both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ContextId, TokenId, Version};

/// Relative slack applied to every inclusive band comparison.
pub const REL_TOL: f64 = 1e-12;

#[inline]
pub(crate) fn le_tol(x: f64, bound: f64) -> bool {
    x <= bound * (1.0 + REL_TOL)
}

#[inline]
pub(crate) fn ge_tol(x: f64, bound: f64) -> bool {
    x >= bound * (1.0 - REL_TOL)
}

/// One generated token as seen by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSample {
    pub context: ContextId,
    pub token: TokenId,
    pub rollout_version: Version,
    /// `log mu_old(token)`, recorded by the generator at draw time.
    pub logp_infer_old: f64,
    /// `log pi_old(token)`, present once acquired by an exact strategy.
    pub logp_train_old: Option<f64>,
    pub advantage: f64,
    pub position: usize,
}

/// `r_total = r_s * r_d` with the logs kept alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioTriple {
    pub r_total: f64,
    pub r_s: f64,
    pub r_d: f64,
    pub log_total: f64,
    pub log_s: f64,
    pub log_d: f64,
}

/// Splits the total ratio `pi_theta / mu_old` into staleness `pi_theta / pi_old`
/// and discrepancy `pi_old / mu_old`.
///
/// `log_total` is defined as `log_s + log_d`, so the factorization holds exactly
/// in log space.
pub fn ratio_decompose(logp_cur: f64, logp_old_train: f64, logp_old_infer: f64) -> Result<RatioTriple> {
    if !(logp_cur.is_finite() && logp_old_train.is_finite() && logp_old_infer.is_finite()) {
        return Err(Error::domain("ratio_decompose requires finite log-probabilities"));
    }
    let log_s = logp_cur - logp_old_train;
    let log_d = logp_old_train - logp_old_infer;
    let log_total = log_s + log_d;
    Ok(RatioTriple {
        r_total: log_total.exp(),
        r_s: log_s.exp(),
        r_d: log_d.exp(),
        log_total,
        log_s,
        log_d,
    })
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain(format!("ratio must be positive and finite, got {r}")));
    }
    Ok(())
}

/// `min(r A, clamp(r, 1 - clip_low, 1 + clip_high) A)`.
pub fn ppo_clip_surrogate(r: f64, advantage: f64, clip_low: f64, clip_high: f64) -> Result<f64> {
    check_ratio(r)?;
    let clamped = r.clamp(1.0 - clip_low, 1.0 + clip_high);
    Ok((r * advantage).min(clamped * advantage))
}

/// Advantage-sign dependent PPO activity: `A >= 0` keeps `r <= 1 + clip_high`,
/// `A < 0` keeps `r >= 1 - clip_low`. Boundaries are active.
pub fn ppo_active_mask(r: f64, advantage: f64, clip_low: f64, clip_high: f64) -> Result<bool> {
    check_ratio(r)?;
    Ok(ppo_active(r, advantage, clip_low, clip_high))
}

#[inline]
fn ppo_active(r: f64, advantage: f64, clip_low: f64, clip_high: f64) -> bool {
    if advantage >= 0.0 {
        le_tol(r, 1.0 + clip_high)
    } else {
        ge_tol(r, 1.0 - clip_low)
    }
}

/// Symmetric band applied to the discrepancy ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscrepancyBound {
    /// `1/c <= r <= c`.
    Multiplicative { c: f64 },
    /// `1 - eps <= r <= 1 + eps`.
    Additive { eps: f64 },
}

impl DiscrepancyBound {
    pub fn interval(&self) -> (f64, f64) {
        match *self {
            DiscrepancyBound::Multiplicative { c } => (1.0 / c, c),
            DiscrepancyBound::Additive { eps } => (1.0 - eps, 1.0 + eps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DiscrepancyBound::Multiplicative { c } if !(c > 1.0 && c.is_finite()) => {
                Err(Error::config(format!("multiplicative mask bound c must exceed 1, got {c}")))
            }
            DiscrepancyBound::Additive { eps } if !(eps > 0.0 && eps < 1.0) => {
                Err(Error::config(format!("additive mask bound must lie in (0, 1), got {eps}")))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn contains(&self, r: f64) -> bool {
        let (lo, hi) = self.interval();
        ge_tol(r, lo) && le_tol(r, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PpoStandard,
    PpoTrainInfer,
    DecoupledTrainInfer,
    PpoEwma,
    PpoEwmaTrainInfer,
    LinearProx,
    LinearProxTrainInfer,
    DecoupledAsync,
}

/// Which factors a variant's MIS role contains besides the PPO mask on `r1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Role {
    pub masks_r2: bool,
    pub weights_r2: bool,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::PpoStandard,
        Variant::PpoTrainInfer,
        Variant::DecoupledTrainInfer,
        Variant::PpoEwma,
        Variant::PpoEwmaTrainInfer,
        Variant::LinearProx,
        Variant::LinearProxTrainInfer,
        Variant::DecoupledAsync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PpoStandard => "ppo_standard",
            Variant::PpoTrainInfer => "ppo_train_infer",
            Variant::DecoupledTrainInfer => "decoupled_train_infer",
            Variant::PpoEwma => "ppo_ewma",
            Variant::PpoEwmaTrainInfer => "ppo_ewma_train_infer",
            Variant::LinearProx => "linear_prox",
            Variant::LinearProxTrainInfer => "linear_prox_train_infer",
            Variant::DecoupledAsync => "decoupled_async",
        }
    }

    pub fn role(self) -> Role {
        use Variant::*;
        match self {
            PpoStandard | PpoTrainInfer => Role {
                masks_r2: false,
                weights_r2: false,
            },
            DecoupledTrainInfer | DecoupledAsync => Role {
                masks_r2: true,
                weights_r2: false,
            },
            PpoEwma | LinearProx => Role {
                masks_r2: false,
                weights_r2: true,
            },
            PpoEwmaTrainInfer | LinearProxTrainInfer => Role {
                masks_r2: true,
                weights_r2: true,
            },
        }
    }

    /// Variants whose reference is the exact training-side old policy.
    pub fn needs_train_old(self) -> bool {
        matches!(self, Variant::PpoStandard | Variant::DecoupledTrainInfer)
    }

    /// Variants whose reference is a constructed proxy log-probability.
    pub fn needs_proxy(self) -> bool {
        matches!(
            self,
            Variant::PpoEwma
                | Variant::PpoEwmaTrainInfer
                | Variant::LinearProx
                | Variant::LinearProxTrainInfer
                | Variant::DecoupledAsync
        )
    }

    pub fn uses_ewma(self) -> bool {
        matches!(self, Variant::PpoEwma | Variant::PpoEwmaTrainInfer)
    }

    pub fn uses_interpolation(self) -> bool {
        matches!(self, Variant::LinearProx | Variant::LinearProxTrainInfer)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

/// How the interpolation proxy combines `mu_old` and `pi_theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProxyForm {
    /// `pi_prox = alpha mu_old + (1 - alpha) pi_theta`.
    #[default]
    Arithmetic,
    /// `log pi_prox = alpha log mu_old + (1 - alpha) log pi_theta`.
    LogLinear,
}

/// Behavior-policy weight of the interpolation proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaRule {
    Fixed { alpha: f64 },
    /// `alpha = 1 / (n + 1)` where `n` is the token's version gap.
    FromGap,
}

impl Default for AlphaRule {
    fn default() -> Self {
        AlphaRule::FromGap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisConfig {
    pub variant: Variant,
    pub clip_low: f64,
    pub clip_high: f64,
    pub disc_mask: DiscrepancyBound,
    #[serde(default)]
    pub alpha: AlphaRule,
    #[serde(default)]
    pub proxy_form: ProxyForm,
    /// Interpolation variants only: test activity with the equivalent bounds on
    /// the total ratio instead of masking and clipping the decomposed ratios.
    #[serde(default)]
    pub reparameterize: bool,
}

impl Default for MisConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PpoEwmaTrainInfer,
            clip_low: 0.2,
            clip_high: 0.2,
            disc_mask: DiscrepancyBound::Multiplicative { c: 1.05 },
            alpha: AlphaRule::FromGap,
            proxy_form: ProxyForm::Arithmetic,
            reparameterize: false,
        }
    }
}

impl MisConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("clip_low", self.clip_low), ("clip_high", self.clip_high)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        self.disc_mask.validate()?;
        if let AlphaRule::Fixed { alpha } = self.alpha {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
            }
        }
        if self.reparameterize && !self.variant.uses_interpolation() {
            return Err(Error::config(format!(
                "reparameterize only applies to interpolation variants, not {}",
                self.variant
            )));
        }
        Ok(())
    }
}

/// `M(r)` for the configured discrepancy band.
pub fn discrepancy_mask(r_d: f64, cfg: &MisConfig) -> Result<bool> {
    check_ratio(r_d)?;
    Ok(cfg.disc_mask.contains(r_d))
}

/// Per-token result of a MIS evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisOutcome {
    /// Product of every indicator factor of the variant's role.
    pub active: bool,
    /// Ratio factors times `r1` times the advantage; the gradient scale when active.
    pub weight: f64,
    pub r1: f64,
    pub r2: Option<f64>,
    /// PPO mask on `r1`.
    pub clip_active: bool,
    /// Discrepancy mask on `r2`; `true` when the role has no mask on `r2`.
    pub mask_active: bool,
}

/// Evaluates one token under the configured variant.
///
/// `logp_prox` is the proxy reference (EWMA, interpolation, or asynchronous
/// actor) and is required by every variant that is not built on `pi_old`.
pub fn mis_weight(
    sample: &TokenSample,
    logp_cur: f64,
    logp_prox: Option<f64>,
    cfg: &MisConfig,
) -> Result<MisOutcome> {
    let variant = cfg.variant;
    let missing = || Error::MissingOldLogit {
        variant,
        version: sample.rollout_version,
    };
    let (log_r1, log_r2) = match variant {
        Variant::PpoStandard => (logp_cur - sample.logp_train_old.ok_or_else(missing)?, None),
        Variant::PpoTrainInfer => (logp_cur - sample.logp_infer_old, None),
        Variant::DecoupledTrainInfer => {
            let old = sample.logp_train_old.ok_or_else(missing)?;
            (logp_cur - old, Some(old - sample.logp_infer_old))
        }
        _ => {
            let prox = logp_prox.ok_or_else(missing)?;
            (logp_cur - prox, Some(prox - sample.logp_infer_old))
        }
    };
    if !log_r1.is_finite() || log_r2.is_some_and(|l| !l.is_finite()) {
        return Err(Error::domain("non-finite log-ratio"));
    }
    let r1 = log_r1.exp();
    let r2 = log_r2.map(f64::exp);
    let role = variant.role();
    let clip_active = ppo_active(r1, sample.advantage, cfg.clip_low, cfg.clip_high);
    let mask_active = match (role.masks_r2, r2) {
        (true, Some(r)) => cfg.disc_mask.contains(r),
        _ => true,
    };
    let ratio_factor = match (role.weights_r2, r2) {
        (true, Some(r)) => r,
        _ => 1.0,
    };
    Ok(MisOutcome {
        active: clip_active && mask_active,
        weight: ratio_factor * r1 * sample.advantage,
        r1,
        r2,
        clip_active,
        mask_active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(infer: f64, train: Option<f64>, adv: f64) -> TokenSample {
        TokenSample {
            context: 0,
            token: 0,
            rollout_version: 3,
            logp_infer_old: infer,
            logp_train_old: train,
            advantage: adv,
            position: 0,
        }
    }

    fn cfg(variant: Variant) -> MisConfig {
        MisConfig {
            variant,
            clip_low: 0.2,
            clip_high: 0.2,
            disc_mask: DiscrepancyBound::Multiplicative { c: 1.01 },
            ..MisConfig::default()
        }
    }

    #[test]
    fn identical_policies_decompose_to_one() {
        let t = ratio_decompose(-1.0, -1.0, -1.0).unwrap();
        assert_eq!((t.r_total, t.r_s, t.r_d), (1.0, 1.0, 1.0));
        assert!(ratio_decompose(f64::NAN, -1.0, -1.0).is_err());
        assert!(ratio_decompose(-1.0, f64::NEG_INFINITY, -1.0).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(ppo_clip_surrogate(1.0, 0.7, 0.1, 0.3).unwrap(), 0.7);
        assert!((ppo_clip_surrogate(1.5, 1.0, 0.2, 0.2).unwrap() - 1.2).abs() < 1e-15);
        assert!((ppo_clip_surrogate(0.5, -1.0, 0.2, 0.2).unwrap() + 0.8).abs() < 1e-15);
        assert!(ppo_clip_surrogate(0.0, 1.0, 0.2, 0.2).is_err());
        assert!(ppo_clip_surrogate(-0.3, 1.0, 0.2, 0.2).is_err());
    }

    #[test]
    fn active_mask_examples() {
        assert!(!ppo_active_mask(1.25, 1.0, 0.2, 0.2).unwrap());
        assert!(ppo_active_mask(1.25, -1.0, 0.2, 0.2).unwrap());
        assert!(ppo_active_mask(1.2, 1.0, 0.2, 0.2).unwrap());
        assert!(ppo_active_mask(0.8, -1.0, 0.2, 0.2).unwrap());
        assert!(ppo_active_mask(0.0, 1.0, 0.2, 0.2).is_err());
    }

    #[test]
    fn discrepancy_mask_examples() {
        let c = cfg(Variant::DecoupledTrainInfer);
        assert!(discrepancy_mask(1.0, &c).unwrap());
        assert!(!discrepancy_mask(1.02, &c).unwrap());
        assert!(discrepancy_mask(1.0 / 1.005, &c).unwrap());
        assert!(discrepancy_mask(1.01, &c).unwrap());
        assert!(discrepancy_mask(1.0 / 1.01, &c).unwrap());
        let additive = MisConfig {
            disc_mask: DiscrepancyBound::Additive { eps: 0.01 },
            ..c
        };
        assert!(discrepancy_mask(0.99, &additive).unwrap());
        assert!(!discrepancy_mask(0.9899, &additive).unwrap());
    }

    #[test]
    fn on_policy_standard_weight_is_advantage() {
        let s = sample(-1.3, Some(-1.1), 0.6);
        let out = mis_weight(&s, -1.1, None, &cfg(Variant::PpoStandard)).unwrap();
        assert!(out.active);
        assert_eq!(out.r1, 1.0);
        assert_eq!(out.weight, 0.6);
    }

    #[test]
    fn decoupled_mask_annihilates() {
        // r_d = exp(0.05) well outside [1/1.01, 1.01]
        let s = sample(-1.05, Some(-1.0), 1.0);
        for cur in [-1.0, -0.5, -2.0] {
            for adv in [1.0, -1.0] {
                let s = TokenSample { advantage: adv, ..s.clone() };
                let out = mis_weight(&s, cur, None, &cfg(Variant::DecoupledTrainInfer)).unwrap();
                assert!(!out.active);
            }
        }
    }

    #[test]
    fn missing_reference_names_variant_and_version() {
        let s = sample(-1.0, None, 1.0);
        for v in [Variant::PpoStandard, Variant::DecoupledTrainInfer, Variant::PpoEwma, Variant::LinearProx] {
            match mis_weight(&s, -1.0, None, &cfg(v)) {
                Err(Error::MissingOldLogit { variant, version }) => {
                    assert_eq!(variant, v);
                    assert_eq!(version, 3);
                }
                other => panic!("expected MissingOldLogit, got {other:?}"),
            }
        }
        assert!(mis_weight(&s, -1.0, None, &cfg(Variant::PpoTrainInfer)).is_ok());
    }

    #[test]
    fn role_factors() {
        let s = sample(-1.0, Some(-1.0), 2.0);
        let prox = -1.0 + 0.04f64; // r2 = e^0.04, outside the 1.01 band
        let cur = prox + 0.01; // r1 = e^0.01
        let plain = mis_weight(&s, cur, Some(prox), &cfg(Variant::PpoEwma)).unwrap();
        assert!(plain.active);
        assert!((plain.weight - 0.04f64.exp() * 0.01f64.exp() * 2.0).abs() < 1e-12);
        let masked = mis_weight(&s, cur, Some(prox), &cfg(Variant::PpoEwmaTrainInfer)).unwrap();
        assert!(!masked.active);
        let decoupled = mis_weight(&s, cur, Some(prox), &cfg(Variant::DecoupledAsync)).unwrap();
        assert!(!decoupled.active);
        assert!((decoupled.weight - 0.01f64.exp() * 2.0).abs() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("ppo_kl".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(Variant::PpoStandard).validate().is_ok());
        let bad = MisConfig { clip_low: 1.0, ..cfg(Variant::PpoStandard) };
        assert!(bad.validate().is_err());
        let bad = MisConfig {
            disc_mask: DiscrepancyBound::Multiplicative { c: 0.99 },
            ..cfg(Variant::PpoStandard)
        };
        assert!(bad.validate().is_err());
        let bad = MisConfig { reparameterize: true, ..cfg(Variant::PpoEwma) };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn log_space_factorization(cur in -20.0f64..0.0, old in -20.0f64..0.0, inf in -20.0f64..0.0) {
            let t = ratio_decompose(cur, old, inf).unwrap();
            prop_assert_eq!(t.log_total, t.log_s + t.log_d);
            prop_assert!((t.r_total - t.r_s * t.r_d).abs() <= 1e-12 * t.r_total.max(1.0));
        }

        #[test]
        fn multiplicative_mask_symmetry(log_r in -0.05f64..0.05, c in 1.001f64..1.05) {
            let cfg = MisConfig { disc_mask: DiscrepancyBound::Multiplicative { c }, ..MisConfig::default() };
            let r = log_r.exp();
            let guard = (r.ln().abs() - c.ln()).abs() < 1e-10;
            if !guard {
                prop_assert_eq!(discrepancy_mask(r, &cfg).unwrap(), discrepancy_mask(1.0 / r, &cfg).unwrap());
            }
        }

        #[test]
        fn standard_reduces_to_plain_ppo(
            infer in -5.0f64..-0.01,
            delta in -0.5f64..0.5,
            adv in -2.0f64..2.0,
            lo in 0.05f64..0.5,
            hi in 0.05f64..0.5,
        ) {
            let s = sample(infer, Some(infer), adv);
            let c = MisConfig { clip_low: lo, clip_high: hi, ..cfg(Variant::PpoStandard) };
            let out = mis_weight(&s, infer + delta, None, &c).unwrap();
            let r = (infer + delta - infer).exp();
            prop_assert_eq!(out.active, ppo_active_mask(r, adv, lo, hi).unwrap());
            let surrogate = ppo_clip_surrogate(r, adv, lo, hi).unwrap();
            if out.active {
                // active branch of the surrogate is r * A, whose gradient scale is r * A
                prop_assert_eq!(surrogate, r * adv);
                prop_assert_eq!(out.weight, r * adv);
            } else {
                let bound = if adv >= 0.0 { 1.0 + hi } else { 1.0 - lo };
                prop_assert_eq!(surrogate, bound * adv);
            }
        }
    }

    #[test]
    fn sign_asymmetry_grid() {
        for i in 0..50 {
            let far_above = 1.5 + 0.1 * i as f64;
            assert!(!ppo_active_mask(far_above, 1.0, 0.2, 0.2).unwrap());
            assert!(ppo_active_mask(far_above, -1.0, 0.2, 0.2).unwrap());
            let far_below = 0.5 - 0.009 * i as f64;
            assert!(ppo_active_mask(far_below, 1.0, 0.2, 0.2).unwrap());
            assert!(!ppo_active_mask(far_below, -1.0, 0.2, 0.2).unwrap());
        }
    }
}
