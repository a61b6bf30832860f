use std::sync::Arc;

use asyncmis::acquisition::{decode_snapshot, encode_snapshot, CostModel, SnapshotStore};
use asyncmis::policy::{log_probs_infer, log_probs_train};
use asyncmis::proxy::{decomposed_active, effective_bounds, loglinear_prox};
use asyncmis::ratio::{
    discrepancy_mask, mis_weight, ppo_active_mask, ppo_clip_surrogate, ratio_decompose, DiscrepancyBound, MisConfig,
    ProxyForm, Variant,
};
use asyncmis::sim::{compute_advantages, AdvantageMode};
use asyncmis::{DiscrepancyModel, Error, EwmaState, PolicyParams, TokenSample, VersionedParams};
use proptest::prelude::*;

fn sample(infer: f64, train: Option<f64>, adv: f64) -> TokenSample {
    TokenSample {
        context: 0,
        token: 0,
        rollout_version: 1,
        logp_infer_old: infer,
        logp_train_old: train,
        advantage: adv,
        position: 0,
    }
}

fn params(nc: usize, vs: usize) -> impl Strategy<Value = PolicyParams> {
    prop::collection::vec(-4.0..4.0f64, nc * vs).prop_map(move |w| PolicyParams::from_weights(nc, vs, w).unwrap())
}

proptest! {
    #[test]
    fn log_ratios_add_exactly(a in -20.0..0.0f64, b in -20.0..0.0f64, c in -20.0..0.0f64) {
        let t = ratio_decompose(a, b, c).unwrap();
        prop_assert_eq!(t.log_total, t.log_s + t.log_d);
        prop_assert_eq!(t.r_s, t.log_s.exp());
        prop_assert_eq!(t.r_d, t.log_d.exp());
    }

    #[test]
    fn mask_is_reciprocal_symmetric(c in 1.0001..1.5f64, r in 0.5..2.0f64) {
        let cfg = MisConfig { disc_mask: DiscrepancyBound::Multiplicative { c }, ..MisConfig::default() };
        let near = |x: f64, b: f64| (x - b).abs() <= 1e-12 * b;
        prop_assume!(!near(r, c) && !near(r, 1.0 / c));
        prop_assert_eq!(discrepancy_mask(r, &cfg).unwrap(), discrepancy_mask(1.0 / r, &cfg).unwrap());
    }

    #[test]
    fn advantage_sign_flips_activity_far_from_one(
        eps_lo in 0.05..0.5f64,
        eps_hi in 0.05..0.5f64,
        up in 1.6..5.0f64,
        down in 0.01..0.45f64,
    ) {
        prop_assert!(!ppo_active_mask(up, 1.0, eps_lo, eps_hi).unwrap());
        prop_assert!(ppo_active_mask(up, -1.0, eps_lo, eps_hi).unwrap());
        prop_assert!(ppo_active_mask(down, 1.0, eps_lo, eps_hi).unwrap());
        prop_assert!(!ppo_active_mask(down, -1.0, eps_lo, eps_hi).unwrap());
    }

    #[test]
    fn boundaries_are_active(eps_lo in 0.01..0.9f64, eps_hi in 0.01..0.9f64, c in 1.001..2.0f64, eps in 0.01..0.9f64) {
        prop_assert!(ppo_active_mask(1.0 + eps_hi, 1.0, eps_lo, eps_hi).unwrap());
        prop_assert!(ppo_active_mask(1.0 - eps_lo, -1.0, eps_lo, eps_hi).unwrap());
        let mult = MisConfig { disc_mask: DiscrepancyBound::Multiplicative { c }, ..MisConfig::default() };
        prop_assert!(discrepancy_mask(c, &mult).unwrap());
        prop_assert!(discrepancy_mask(1.0 / c, &mult).unwrap());
        let add = MisConfig { disc_mask: DiscrepancyBound::Additive { eps }, ..MisConfig::default() };
        prop_assert!(discrepancy_mask(1.0 + eps, &add).unwrap());
        prop_assert!(discrepancy_mask(1.0 - eps, &add).unwrap());
    }

    #[test]
    fn softmax_rows_normalize(p in params(3, 6), magnitude in 0.0..0.5f64, seed in any::<u64>(), version in 0..50u64) {
        let disc = DiscrepancyModel::hashed(magnitude, seed);
        let vp = VersionedParams::new(version, p.clone());
        for c in 0..3 {
            let t: f64 = log_probs_train(&p, c).unwrap().iter().map(|l| l.exp()).sum();
            let i: f64 = log_probs_infer(&vp, c, &disc).unwrap().iter().map(|l| l.exp()).sum();
            prop_assert!((t - 1.0).abs() < 1e-12);
            prop_assert!((i - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_discrepancy_is_bit_identical(p in params(2, 5), version in 0..50u64) {
        let vp = VersionedParams::new(version, p.clone());
        for c in 0..2 {
            let t = log_probs_train(&p, c).unwrap();
            let i = log_probs_infer(&vp, c, &DiscrepancyModel::none()).unwrap();
            prop_assert_eq!(t.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), i.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn perturbation_is_bounded(p in params(2, 5), magnitude in 0.0..0.2f64, seed in any::<u64>()) {
        let vp = VersionedParams::new(3, p.clone());
        let disc = DiscrepancyModel::hashed(magnitude, seed);
        for c in 0..2 {
            let t = log_probs_train(&p, c).unwrap();
            let i = log_probs_infer(&vp, c, &disc).unwrap();
            for (a, b) in t.iter().zip(&i) {
                prop_assert!((a - b).abs() <= 2.0 * magnitude + 1e-12);
            }
        }
    }

    #[test]
    fn row_shift_leaves_logprobs_unchanged(p in params(1, 5), shift in -10.0..10.0f64) {
        let shifted = PolicyParams::from_weights(1, 5, p.weights().iter().map(|w| w + shift).collect()).unwrap();
        let a = log_probs_train(&p, 0).unwrap();
        let b = log_probs_train(&shifted, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loglinear_ratios_are_powers(mu in -6.0..-0.01f64, d in -0.5..0.5f64, alpha in 0.01..0.99f64) {
        let pi = (mu + d).min(-1e-9);
        let prox = loglinear_prox(mu, pi, alpha).unwrap();
        let r = (pi - mu).exp();
        prop_assert!(((prox - mu).exp() - r.powf(1.0 - alpha)).abs() < 1e-13);
        prop_assert!(((pi - prox).exp() - r.powf(alpha)).abs() < 1e-13);
    }

    #[test]
    fn reparameterized_bounds_agree_with_decomposed_constraints(
        log_r in -0.4..0.4f64,
        adv in -1.0..1.0f64,
        alpha in 0.25..0.9f64,
        eps1 in 0.001..0.1f64,
        clip_lo in 0.01..0.3f64,
        clip_hi in 0.01..0.3f64,
        loglinear in any::<bool>(),
    ) {
        let form = if loglinear { ProxyForm::LogLinear } else { ProxyForm::Arithmetic };
        let r = log_r.exp();
        let b = effective_bounds(form, (1.0 - eps1, 1.0 + eps1), 1.0 - clip_lo, 1.0 + clip_hi, alpha).unwrap();
        let guard = [b.mask_interval.0, b.mask_interval.1, b.clip_upper_pos, b.clip_lower_neg]
            .iter()
            .any(|&x| (r - x).abs() <= 1e-12 * x);
        prop_assume!(!guard);
        let dec = decomposed_active(form, r, adv, DiscrepancyBound::Additive { eps: eps1 }, clip_lo, clip_hi, alpha);
        prop_assert_eq!(b.admits(r, adv, true), dec);
    }

    #[test]
    fn ewma_constant_sequence_is_a_fixed_point(p in params(2, 3), beta in 0.01..0.99f64, n in 1..30usize) {
        let mut s = EwmaState::new(&p, beta, 0.9).unwrap();
        for _ in 0..n {
            s.update(&p).unwrap();
            for (a, b) in s.theta_prox().weights().iter().zip(p.weights()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn reset_recenters_on_the_actor(a in params(2, 4), b in params(2, 4), rho in 0.0..0.8999f64) {
        let mut s = EwmaState::new(&a, 0.75, 0.9).unwrap();
        s.update(&a).unwrap();
        prop_assert!(s.maybe_reset(rho, &b).unwrap());
        prop_assert_eq!(s.cum_weight(), 1.0);
        for c in 0..2 {
            let cur = log_probs_train(&b, c).unwrap();
            let prox = log_probs_train(s.theta_prox(), c).unwrap();
            for (x, y) in cur.iter().zip(&prox) {
                prop_assert_eq!((x - y).exp(), 1.0);
            }
        }
        prop_assert!(!s.maybe_reset(0.9, &b).unwrap());
    }

    #[test]
    fn group_deviations_center(rewards in prop::collection::vec(-1.0..1.0f64, 8)) {
        let dev = compute_advantages(&rewards, 4, AdvantageMode::MeanCentered).unwrap();
        for g in dev.chunks(4) {
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
        let norm = compute_advantages(&rewards, 4, AdvantageMode::GroupNormalized).unwrap();
        prop_assert!(norm.iter().all(|x| x.is_finite() && x.abs() <= 2.0));
    }

    #[test]
    fn snapshot_container_round_trips(p in params(3, 4), version in any::<u64>()) {
        let v = VersionedParams::new(version, p);
        let bytes = encode_snapshot(&v);
        let back = decode_snapshot(&bytes).unwrap();
        prop_assert_eq!(back.version, version);
        prop_assert_eq!(back.params.weights().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        v.params.weights().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn corrupted_snapshot_fails_its_checksum(p in params(2, 2), at in 0usize..32, bit in 0u8..8) {
        let mut bytes = encode_snapshot(&VersionedParams::new(1, p));
        let n = bytes.len();
        let i = n - 1 - at;
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_snapshot(&bytes).is_err());
    }

    #[test]
    fn store_keeps_newest_versions(max_resident in 1usize..6, count in 1u64..20) {
        let mut store = SnapshotStore::new(max_resident, CostModel::zero()).unwrap();
        for v in 1..=count {
            store.put(VersionedParams::new(v, PolicyParams::random(2, 2, 1.0, v))).unwrap();
            prop_assert!(store.len() <= max_resident);
        }
        let first = count.saturating_sub(max_resident as u64) + 1;
        prop_assert_eq!(store.resident_versions(), (first..=count).collect::<Vec<_>>());
        for v in first..=count {
            let got: &Arc<PolicyParams> = store.get(v).unwrap();
            let want = PolicyParams::random(2, 2, 1.0, v);
            prop_assert_eq!(got.weights(), want.weights());
        }
        if first > 1 {
            let evicted = matches!(store.get(first - 1), Err(Error::SnapshotEvicted { .. }));
            prop_assert!(evicted);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn ppo_standard_reduces_to_clipped_surrogate(
        infer in -8.0..-0.01f64,
        d in -0.6..0.6f64,
        adv in -2.0..2.0f64,
        clip_lo in 0.01..0.5f64,
        clip_hi in 0.01..0.5f64,
    ) {
        let cfg = MisConfig { variant: Variant::PpoStandard, clip_low: clip_lo, clip_high: clip_hi, ..MisConfig::default() };
        let cur = infer + d;
        let out = mis_weight(&sample(infer, Some(infer), adv), cur, None, &cfg).unwrap();
        let r = (cur - infer).exp();
        prop_assert_eq!(out.r1, r);
        prop_assert_eq!(out.active, ppo_active_mask(r, adv, clip_lo, clip_hi).unwrap());
        prop_assert_eq!(out.weight, r * adv);
        if out.active {
            let surrogate = ppo_clip_surrogate(r, adv, clip_lo, clip_hi).unwrap();
            prop_assert!((surrogate - r * adv).abs() <= 1e-12 * (r * adv).abs().max(1e-300));
        }
    }
}
