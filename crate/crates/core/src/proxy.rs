//! Interpolation proxies and the effective bounds they induce on the total ratio.
//!
//! Building `pi_prox` by interpolating between `mu_old` and `pi_theta` makes both
//! decomposed ratios deterministic functions of `r = pi_theta / mu_old`, so the
//! mask and clip constraints collapse to an interval on `r` itself. The functions
//! here compute that interval in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratio::{ge_tol, le_tol, DiscrepancyBound, MisConfig, ProxyForm};

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_eps(name: &str, eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(format!("{name} must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

/// Arithmetic proxy probability `alpha p_old_infer + (1 - alpha) p_cur`.
pub fn linear_prox(p_old_infer: f64, p_cur: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    for p in [p_old_infer, p_cur] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::domain(format!("probability must lie in (0, 1], got {p}")));
        }
    }
    Ok(p_cur + alpha * (p_old_infer - p_cur))
}

/// Arithmetic proxy evaluated in log space: `log(alpha e^a + (1 - alpha) e^b)`.
pub fn linear_prox_log(logp_old_infer: f64, logp_cur: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let a = alpha.ln() + logp_old_infer;
    let b = (1.0 - alpha).ln() + logp_cur;
    let m = a.max(b);
    Ok(m + ((a - m).exp() + (b - m).exp()).ln())
}

/// Token-wise log-linear proxy `alpha logp_old_infer + (1 - alpha) logp_cur`.
pub fn loglinear_prox(logp_old_infer: f64, logp_cur: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * logp_old_infer + (1.0 - alpha) * logp_cur)
}

/// Behavior-policy weight `1 / (n + 1)` for a version gap of `n`.
pub fn alpha_from_gap(n: u64) -> Result<f64> {
    if n < 1 {
        return Err(Error::domain("version gap must be at least 1"));
    }
    Ok(1.0 / (n as f64 + 1.0))
}

/// Constraints on `r = pi_theta / mu_old` equivalent to masking `r_d` and clipping `r_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveBounds {
    pub mask_interval: (f64, f64),
    /// Upper bound on `r` when the advantage is non-negative.
    pub clip_upper_pos: f64,
    /// Lower bound on `r` when the advantage is negative.
    pub clip_lower_neg: f64,
}

impl EffectiveBounds {
    /// Activity of a token with total ratio `r`; `masked = false` drops the mask interval.
    pub fn admits(&self, r: f64, advantage: f64, masked: bool) -> bool {
        let (lo, hi) = self.mask_interval;
        let in_mask = !masked || (ge_tol(r, lo) && le_tol(r, hi));
        let in_clip = if advantage >= 0.0 {
            le_tol(r, self.clip_upper_pos)
        } else {
            ge_tol(r, self.clip_lower_neg)
        };
        in_mask && in_clip
    }

    /// Active region on `r` for one advantage sign, as `(lower, upper)`.
    pub fn active_interval(&self, advantage: f64) -> (f64, f64) {
        let (lo, hi) = self.mask_interval;
        if advantage >= 0.0 {
            (lo, hi.min(self.clip_upper_pos))
        } else {
            (lo.max(self.clip_lower_neg), hi)
        }
    }

    /// Bounds for an interpolation variant under `cfg` with behavior weight `alpha`.
    pub fn for_config(cfg: &MisConfig, alpha: f64) -> Result<Self> {
        let (lo, hi) = cfg.disc_mask.interval();
        effective_bounds(cfg.proxy_form, (lo, hi), 1.0 - cfg.clip_low, 1.0 + cfg.clip_high, alpha)
    }
}

/// Effective bounds for explicit mask and clip intervals on the decomposed ratios.
pub fn effective_bounds(
    form: ProxyForm,
    (mask_lo, mask_hi): (f64, f64),
    clip_lo: f64,
    clip_hi: f64,
    alpha: f64,
) -> Result<EffectiveBounds> {
    check_alpha(alpha)?;
    let keep = 1.0 - alpha;
    Ok(match form {
        ProxyForm::LogLinear => EffectiveBounds {
            mask_interval: (mask_lo.powf(1.0 / keep), mask_hi.powf(1.0 / keep)),
            clip_upper_pos: clip_hi.powf(1.0 / alpha),
            clip_lower_neg: clip_lo.powf(1.0 / alpha),
        },
        ProxyForm::Arithmetic => {
            let denom_hi = 1.0 - keep * clip_hi;
            if denom_hi <= 0.0 {
                return Err(Error::SingularBound {
                    product: keep * clip_hi,
                });
            }
            EffectiveBounds {
                mask_interval: (1.0 - (1.0 - mask_lo) / keep, 1.0 + (mask_hi - 1.0) / keep),
                clip_upper_pos: alpha * clip_hi / denom_hi,
                clip_lower_neg: alpha * clip_lo / (1.0 - keep * clip_lo),
            }
        }
    })
}

/// Effective bounds for the log-linear proxy with an additive mask `[1 - eps1, 1 + eps1]`
/// and clip band `[1 - eps2_low, 1 + eps2_high]`.
pub fn effective_bounds_loglinear(eps1: f64, eps2_low: f64, eps2_high: f64, alpha: f64) -> Result<EffectiveBounds> {
    check_eps("eps1", eps1)?;
    check_eps("eps2_low", eps2_low)?;
    check_eps("eps2_high", eps2_high)?;
    effective_bounds(
        ProxyForm::LogLinear,
        (1.0 - eps1, 1.0 + eps1),
        1.0 - eps2_low,
        1.0 + eps2_high,
        alpha,
    )
}

/// Effective bounds for the arithmetic proxy; fails with `SingularBound` when
/// `(1 - alpha)(1 + eps2_high) >= 1`.
pub fn effective_bounds_arithmetic(eps1: f64, eps2_low: f64, eps2_high: f64, alpha: f64) -> Result<EffectiveBounds> {
    check_eps("eps1", eps1)?;
    check_eps("eps2_low", eps2_low)?;
    check_eps("eps2_high", eps2_high)?;
    effective_bounds(
        ProxyForm::Arithmetic,
        (1.0 - eps1, 1.0 + eps1),
        1.0 - eps2_low,
        1.0 + eps2_high,
        alpha,
    )
}

/// Decomposed ratios `(r_d, r_s)` induced by an interpolation proxy at total ratio `r`.
pub fn decomposed_ratios(form: ProxyForm, r: f64, alpha: f64) -> (f64, f64) {
    match form {
        ProxyForm::LogLinear => {
            let lr = r.ln();
            (((1.0 - alpha) * lr).exp(), (alpha * lr).exp())
        }
        ProxyForm::Arithmetic => {
            let r_d = alpha + (1.0 - alpha) * r;
            (r_d, r / r_d)
        }
    }
}

/// Activity before reparameterization: `mask` on the induced `r_d` and the PPO
/// band on the induced `r_s`.
pub fn decomposed_active(
    form: ProxyForm,
    r: f64,
    advantage: f64,
    mask: DiscrepancyBound,
    clip_low: f64,
    clip_high: f64,
    alpha: f64,
) -> bool {
    let (r_d, r_s) = decomposed_ratios(form, r, alpha);
    let clip_ok = if advantage >= 0.0 {
        le_tol(r_s, 1.0 + clip_high)
    } else {
        ge_tol(r_s, 1.0 - clip_low)
    };
    mask.contains(r_d) && clip_ok
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round4(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    #[test]
    fn linear_prox_examples() {
        assert_eq!(linear_prox(0.3, 0.3, 0.42).unwrap(), 0.3);
        assert!((linear_prox(0.2, 0.4, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert!((linear_prox(0.2, 0.4, 1e-9).unwrap() - 0.4).abs() < 1e-8);
        assert!(linear_prox(0.2, 0.4, 0.0).is_err());
        assert!(linear_prox(0.2, 0.4, 1.0).is_err());
        assert!(linear_prox(0.0, 0.4, 0.5).is_err());
        let lp = linear_prox_log(0.2f64.ln(), 0.4f64.ln(), 0.5).unwrap();
        assert!((lp.exp() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn loglinear_examples() {
        assert_eq!(loglinear_prox(-0.7, -0.7, 0.3).unwrap(), -0.7);
        assert!((loglinear_prox(-1.3, -1.0, 0.25).unwrap() + 1.075).abs() < 1e-15);
        // r_d = r^(1 - alpha), r_s = r^alpha
        let (mu, pi, a) = (-1.3f64, -1.0f64, 0.25);
        let prox = loglinear_prox(mu, pi, a).unwrap();
        let r = (pi - mu).exp();
        assert!(((prox - mu).exp() - r.powf(1.0 - a)).abs() < 1e-14);
        assert!(((pi - prox).exp() - r.powf(a)).abs() < 1e-14);
    }

    #[test]
    fn alpha_rule() {
        assert_eq!(alpha_from_gap(1).unwrap(), 0.5);
        assert_eq!(alpha_from_gap(2).unwrap(), 1.0 / 3.0);
        assert_eq!(alpha_from_gap(3).unwrap(), 0.25);
        assert!(alpha_from_gap(0).is_err());
    }

    #[test]
    fn loglinear_table_rows() {
        let b = effective_bounds_loglinear(0.010, 0.003, 0.004, alpha_from_gap(1).unwrap()).unwrap();
        assert_eq!(round4(b.mask_interval.0), 0.9801);
        assert_eq!(round4(b.mask_interval.1), 1.0201);
        assert_eq!(round4(b.clip_lower_neg), 0.9940);
        assert_eq!(round4(b.clip_upper_pos), 1.0080);
        let b = effective_bounds_loglinear(0.010, 0.003, 0.004, alpha_from_gap(2).unwrap()).unwrap();
        assert_eq!(round4(b.mask_interval.0), 0.9850);
        assert_eq!(round4(b.mask_interval.1), 1.0150);
        assert_eq!(round4(b.clip_lower_neg), 0.9910);
        assert_eq!(round4(b.clip_upper_pos), 1.0120);
    }

    #[test]
    fn arithmetic_table_rows() {
        let b = effective_bounds_arithmetic(0.010, 0.003, 0.004, 0.5).unwrap();
        assert_eq!(round4(b.mask_interval.0), 0.9800);
        assert_eq!(round4(b.mask_interval.1), 1.0200);
        assert_eq!(round4(b.clip_lower_neg), 0.9940);
        assert_eq!(round4(b.clip_upper_pos), 1.0080);
        let b = effective_bounds_arithmetic(0.010, 0.003, 0.004, 0.25).unwrap();
        assert_eq!(round4(b.mask_interval.0), 0.9867);
        assert_eq!(round4(b.mask_interval.1), 1.0133);
        assert_eq!(round4(b.clip_lower_neg), 0.9881);
        assert_eq!(round4(b.clip_upper_pos), 1.0162);
        let b = effective_bounds_arithmetic(0.020, 0.003, 0.004, 1.0 / 3.0).unwrap();
        assert_eq!(round4(b.mask_interval.0), 0.9700);
        assert_eq!(round4(b.mask_interval.1), 1.0300);
    }

    #[test]
    fn zero_width_limit() {
        for a in [0.1, 0.5, 0.9] {
            for b in [
                effective_bounds_loglinear(1e-12, 1e-12, 1e-12, a).unwrap(),
                effective_bounds_arithmetic(1e-12, 1e-12, 1e-12, a).unwrap(),
            ] {
                for v in [b.mask_interval.0, b.mask_interval.1, b.clip_lower_neg, b.clip_upper_pos] {
                    assert!((v - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singular_arithmetic_bound() {
        // (1 - 0.1)(1 + 0.2) = 1.08 >= 1
        assert!(matches!(
            effective_bounds_arithmetic(0.01, 0.01, 0.2, 0.1),
            Err(Error::SingularBound { .. })
        ));
        assert!(effective_bounds_loglinear(0.01, 0.01, 0.2, 0.1).is_ok());
    }

    #[test]
    fn bounds_bracket_one() {
        for n in 1..=3 {
            let a = alpha_from_gap(n).unwrap();
            for b in [
                effective_bounds_loglinear(0.01, 0.003, 0.004, a).unwrap(),
                effective_bounds_arithmetic(0.01, 0.003, 0.004, a).unwrap(),
            ] {
                assert!(b.mask_interval.0 < 1.0 && 1.0 < b.mask_interval.1);
                assert!(b.clip_lower_neg < 1.0 && 1.0 < b.clip_upper_pos);
            }
        }
    }
}
