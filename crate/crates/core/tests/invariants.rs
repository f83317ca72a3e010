use ndarray::{ArrayD, IxDyn};
use nofrost::analysis::{decision_margin, ks_two_sample, model_smoothness, spearman, thickness_from_profile, ThicknessConfig};
use nofrost::attacks::{argmax_rows, kl_rows, project_linf, softmax_rows};
use nofrost::augment::{corrupt, CorruptionKind, CorruptionSpec};
use nofrost::nfcore::{
    fan_in, mbn_interpolate_logits, scaled_weight_standardize, Branch, Checkpoint, CheckpointMeta, MixSet, Mode, ModelConfig,
    Network, NormStrategy, Routing, SiteStats,
};
use proptest::prelude::*;

fn tensor(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), vals.iter().cycle().take(n).copied().collect()).unwrap()
}

fn small_model(norm: NormStrategy) -> ModelConfig {
    ModelConfig {
        width: 2,
        num_classes: 3,
        input_shape: [2, 8, 8],
        norm,
        ..ModelConfig::default()
    }
}

fn images(n: usize, seed: u64) -> ArrayD<f64> {
    use rand::Rng;
    let mut rng = nofrost::seeding::rng(seed, &[]);
    ArrayD::from_shape_fn(IxDyn(&[n, 2, 8, 8]), |_| rng.random_range(0.0..1.0))
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sws_rows_have_zero_mean_and_gain_over_root_fan_in(
        out in 1usize..6, cin in 1usize..5, k in prop::sample::select(vec![1usize, 3]),
        vals in prop::collection::vec(-5.0f64..5.0, 8..64), gain in 0.1f64..3.0,
    ) {
        let w = tensor(&[out, cin, k, k], &vals);
        let fan = fan_in(w.shape()).unwrap();
        prop_assume!(w.outer_iter().all(|r| {
            let m = r.sum() / r.len() as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / r.len() as f64 > 1e-3
        }));
        let s = scaled_weight_standardize(&w, gain, 1e-10).unwrap();
        for row in s.outer_iter() {
            let n = row.len() as f64;
            let m = row.sum() / n;
            let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() <= 1e-9);
            prop_assert!((sd - gain / (fan as f64).sqrt()).abs() <= 1e-6 * gain);
        }
    }

    #[test]
    fn projection_is_contained_and_idempotent(
        x in prop::collection::vec(0.0f64..=1.0, 6), d in prop::collection::vec(-2.0f64..2.0, 6), eps in 0.0f64..0.2,
    ) {
        let x = tensor(&[1, 6], &x);
        let far = &x + &tensor(&[1, 6], &d);
        let p = project_linf(&far, &x, eps, (0.0, 1.0)).unwrap();
        prop_assert!(max_abs_diff(&p, &x) <= eps + 1e-15);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let q = project_linf(&p, &x, eps, (0.0, 1.0)).unwrap();
        prop_assert_eq!(p, q);
    }

    #[test]
    fn margin_sign_matches_argmax(z in prop::collection::vec(-4.0f64..4.0, 2..7), y in 0usize..6) {
        let k = z.len();
        let y = y % k;
        let p = softmax_rows(&tensor(&[1, k], &z));
        let p: Vec<f64> = p.iter().copied().collect();
        let mut sorted = p.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[k - 1] - sorted[k - 2] > 1e-12);
        let m = decision_margin(&p, y).unwrap();
        let arg = argmax_rows(&tensor(&[1, k], &p))[0];
        prop_assert_eq!(m > 0.0, arg == y);
        prop_assert!((-1.0..=1.0).contains(&m));
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_the_diagonal(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        let p = softmax_rows(&tensor(&[1, 4], &a));
        let q = softmax_rows(&tensor(&[1, 4], &b));
        prop_assert!(kl_rows(&p, &q)[0] >= 0.0);
        prop_assert!(kl_rows(&p, &p)[0].abs() <= 1e-12);
        let (pv, qv): (Vec<f64>, Vec<f64>) = (p.iter().copied().collect(), q.iter().copied().collect());
        prop_assert!(model_smoothness(&pv, &qv) >= 0.0);
    }

    #[test]
    fn logit_interpolation_endpoints(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6), g in 0.0f64..=1.0) {
        let (za, zb) = (tensor(&[2, 3], &a), tensor(&[2, 3], &b));
        prop_assert_eq!(mbn_interpolate_logits(&za, &zb, 0.0).unwrap(), za.clone());
        prop_assert_eq!(mbn_interpolate_logits(&za, &zb, 1.0).unwrap(), zb.clone());
        let mid = mbn_interpolate_logits(&za, &zb, g).unwrap();
        for ((m, x), y) in mid.iter().zip(za.iter()).zip(zb.iter()) {
            prop_assert!(*m >= x.min(*y) - 1e-12 && *m <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn spearman_of_a_monotone_map_is_one(x in prop::collection::vec(-10.0f64..10.0, 3..20)) {
        let mut distinct = x.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() == x.len());
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v.exp()).collect();
        prop_assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ks_statistic_matches_brute_force(a in prop::collection::vec(-3.0f64..3.0, 1..15), b in prop::collection::vec(-3.0f64..3.0, 1..15)) {
        let ecdf = |s: &[f64], t: f64| s.iter().filter(|v| **v <= t).count() as f64 / s.len() as f64;
        let d = a.iter().chain(&b).map(|&t| (ecdf(&a, t) - ecdf(&b, t)).abs()).fold(0.0, f64::max);
        let r = ks_two_sample(&a, &b).unwrap();
        prop_assert!((r.statistic - d).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }

    #[test]
    fn corruptions_stay_in_range_and_repeat(vals in prop::collection::vec(0.0f64..=1.0, 48), sev in 1u8..=5, seed in any::<u64>()) {
        let x = tensor(&[3, 4, 4], &vals);
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec { seed, ..CorruptionSpec::new(kind, sev) };
            let a = corrupt(&x, &spec).unwrap();
            prop_assert_eq!(a.shape(), x.shape());
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a, corrupt(&x, &spec).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn per_sample_norms_do_not_mix_the_batch(seed in 0u64..1000, norm in prop::sample::select(vec![NormStrategy::In, NormStrategy::Nf])) {
        let net = Network::new(small_model(norm), seed).unwrap();
        let x = images(3, seed);
        let y = images(3, seed + 1);
        let mut mixed = x.clone();
        mixed.index_axis_mut(ndarray::Axis(0), 1).assign(&y.index_axis(ndarray::Axis(0), 1));
        mixed.index_axis_mut(ndarray::Axis(0), 2).assign(&y.index_axis(ndarray::Axis(0), 2));
        let a = net.predict(&x, &Routing::Unrouted).unwrap();
        let b = net.predict(&mixed, &Routing::Unrouted).unwrap();
        // Row 0 depends only on sample 0, also in train mode.
        prop_assert!(a.index_axis(ndarray::Axis(0), 0) == b.index_axis(ndarray::Axis(0), 0));
        let mut n1 = net.clone();
        let mut n2 = net.clone();
        let ta = n1.forward(&x, &Routing::Unrouted, Mode::Train).unwrap();
        let tb = n2.forward(&mixed, &Routing::Unrouted, Mode::Train).unwrap();
        prop_assert!(ta.index_axis(ndarray::Axis(0), 0) == tb.index_axis(ndarray::Axis(0), 0));
    }

    #[test]
    fn mbn_branches_are_isolated_and_interpolation_hits_the_ends(seed in 0u64..1000, g in 0.0f64..=1.0) {
        let mut net = Network::new(small_model(NormStrategy::Mbn), seed).unwrap();
        let banks = |n: &Network, b: Branch| -> Vec<(Vec<f64>, Vec<f64>)> {
            n.site_stats().iter().filter_map(|s| match s {
                SiteStats::Mbn(st) => Some((st.bank(b).mean.to_vec(), st.bank(b).var.to_vec())),
                _ => None,
            }).collect()
        };
        let adv0 = banks(&net, Branch::Adv);
        let clean0 = banks(&net, Branch::Clean);
        prop_assert!(!adv0.is_empty());
        net.forward(&images(4, seed), &Routing::CLEAN, Mode::Train).unwrap();
        prop_assert_eq!(&banks(&net, Branch::Adv), &adv0);
        prop_assert!(banks(&net, Branch::Clean) != clean0);
        net.forward(&images(4, seed + 7), &Routing::ADV, Mode::Train).unwrap();
        prop_assert!(banks(&net, Branch::Adv) != adv0);

        let x = images(2, seed + 3);
        let clean = net.predict(&x, &Routing::CLEAN).unwrap();
        let adv = net.predict(&x, &Routing::ADV).unwrap();
        let at = |gamma: f64| net.predict(&x, &Routing::Interpolate { gamma, mix: MixSet::All }).unwrap();
        prop_assert!(max_abs_diff(&at(0.0), &clean) <= 1e-12);
        prop_assert!(max_abs_diff(&at(1.0), &adv) <= 1e-12);
        let logits = net.predict(&x, &Routing::Interpolate { gamma: g, mix: MixSet::None }).unwrap();
        prop_assert!(max_abs_diff(&logits, &mbn_interpolate_logits(&clean, &adv, g).unwrap()) <= 1e-12);
    }

    #[test]
    fn construction_and_checkpoints_are_deterministic(seed in any::<u64>(), norm in prop::sample::select(vec![NormStrategy::Bn, NormStrategy::Mbn, NormStrategy::Nf, NormStrategy::In])) {
        let cfg = small_model(norm);
        let a = Network::new(cfg.clone(), seed).unwrap();
        let b = Network::new(cfg.clone(), seed).unwrap();
        let x = images(2, 5);
        let route = if norm == NormStrategy::Mbn { Routing::ADV } else { Routing::Unrouted };
        let pa = a.predict(&x, &route).unwrap();
        prop_assert!(pa.iter().zip(b.predict(&x, &route).unwrap().iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        let meta = CheckpointMeta {
            method: "st".into(),
            norm: norm.name().into(),
            config_hash: "h".into(),
            seed,
            epoch: 0,
            model: cfg,
            extra: Default::default(),
        };
        let ck = Checkpoint::from_network(&a, meta);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &ck);
        let restored = back.to_network().unwrap();
        prop_assert!(pa.iter().zip(restored.predict(&x, &route).unwrap().iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

/// Closed form for a linear profile `g(t) = s (t - c)` on a unit segment.
fn linear_thickness(s: f64, c: f64, alpha: f64, beta: f64) -> f64 {
    ((c + beta / s).clamp(0.0, 1.0) - (c + alpha / s).clamp(0.0, 1.0)).max(0.0)
}

#[test]
fn thickness_quadrature_converges_to_closed_form() {
    for (s, c) in [(2.0, 0.5), (3.0, 0.2), (1.5, 0.7), (8.0, 0.4)] {
        let mut last = f64::INFINITY;
        for points in [10usize, 100, 1000, 10_000] {
            let cfg = ThicknessConfig {
                quadrature_points: points,
                ..ThicknessConfig::default()
            };
            let q = thickness_from_profile(1.0, &cfg, |t| s * (t - c)).unwrap();
            let err = (q - linear_thickness(s, c, cfg.alpha, cfg.beta)).abs();
            assert!(err <= 2.0 / points as f64, "s={s} c={c} points={points}: error {err}");
            assert!(err <= last + 1e-12);
            last = err;
        }
    }
    // Scales with the segment length.
    let q = thickness_from_profile(4.0, &ThicknessConfig::default(), |t| 2.0 * t - 1.0).unwrap();
    assert!((q - 4.0 * 0.375).abs() <= 4.0 * 2.0 / 100.0);
}

#[test]
fn ks_exact_p_value_for_separated_samples() {
    // With full separation the two-sided exact p-value is 2 / C(n + m, n).
    for (n, m) in [(3usize, 3usize), (4, 6), (8, 8)] {
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..m).map(|i| 100.0 + i as f64).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        let binom = (1..=n).fold(1.0, |acc, i| acc * (m + i) as f64 / i as f64);
        assert!(r.exact);
        assert_eq!(r.statistic, 1.0);
        assert!((r.p_value - 2.0 / binom).abs() < 1e-12, "{n},{m}: {} vs {}", r.p_value, 2.0 / binom);
    }
}
