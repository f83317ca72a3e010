use approx::assert_abs_diff_eq;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::losses::loss_value;
use super::*;
use crate::attacks::AttackConfig;
use crate::augment::{Augmenter, DeepAugmentConfig};
use crate::autograd::{Graph, Tensor};
use crate::data::Dataset;
use crate::nfcore::{Arch, Branch, ModelConfig, Network, NormStrategy, SiteStats};
use crate::seeding;

fn mlp(norm: NormStrategy) -> ModelConfig {
    ModelConfig {
        arch: Arch::Mlp,
        depth: 2,
        width: 6,
        num_classes: 3,
        input_shape: [1, 2, 2],
        norm,
        ..ModelConfig::default()
    }
}

fn batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = seeding::rng(seed, &[42]);
    let x = ArrayD::from_shape_fn(IxDyn(&[n, 1, 2, 2]), |_| rng.random_range(0.0..1.0));
    let y = (0..n).map(|i| i % 3).collect();
    (x, y)
}

/// Two linearly separable classes on 2 pixels, with margin 0.3 around x0 + x1 = 1.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = seeding::rng(seed, &[7]);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while ys.len() < n {
        let (a, b): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        if (a + b - 1.0).abs() < 0.3 {
            continue;
        }
        xs.extend([a, b]);
        ys.push(usize::from(a + b > 1.0));
    }
    Dataset::new(ArrayD::from_shape_vec(IxDyn(&[n, 1, 1, 2]), xs).unwrap(), ys, 2).unwrap()
}

fn attack() -> AttackConfig {
    AttackConfig::pgd(0.1, 3).with_seed(5)
}

fn zero_attack() -> AttackConfig {
    AttackConfig {
        eps: 0.0,
        step_size: 0.01,
        ..attack()
    }
}

fn cfg_for(method: MethodKind) -> TrainConfig {
    TrainConfig {
        method,
        attack: attack(),
        ..TrainConfig::default()
    }
}

#[test]
fn method_names_and_norm_rules() {
    for m in MethodKind::ALL {
        assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        m.check_norm(m.default_norm()).unwrap();
    }
    assert_eq!("TRADES-FAT".parse::<MethodKind>().unwrap(), MethodKind::TradesFat);
    assert!("adamw".parse::<MethodKind>().is_err());
    assert!(MethodKind::Nofrost.check_norm(NormStrategy::Bn).is_err());
    assert!(MethodKind::Mbnat.check_norm(NormStrategy::Bn).is_err());
    assert!(MethodKind::Sat.check_norm(NormStrategy::Mbn).is_err());
    MethodKind::Sat.check_norm(NormStrategy::In).unwrap();
    MethodKind::St.check_norm(NormStrategy::Nf).unwrap();
}

#[test]
fn config_round_trips_and_validates() {
    let c = cfg_for(MethodKind::TradesFat);
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    let bad = TrainConfig {
        lambda: 1.5,
        ..c.clone()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn at_loss_endpoints_and_convex_combination() {
    let net = Network::new(mlp(NormStrategy::Bn), 1).unwrap();
    let (x, y) = batch(6, 1);
    let st = loss_value(&net, &cfg_for(MethodKind::St), &x, &y, &Default::default()).unwrap();
    let l0 = at_loss(&net, &x, &y, 0.0, &attack()).unwrap();
    assert_eq!(l0.total, st.total);
    assert_eq!(l0.terms.len(), 1);

    // lambda = 1 is the CE of the adversarial batch alone.
    let prep = prepare(&net, &cfg_for(MethodKind::Pgdat), &x, &y, 5, None, 0).unwrap();
    let xa = prep.x_adv.clone().unwrap();
    let ce_adv = loss_value(&net, &cfg_for(MethodKind::St), &xa, &y, &Default::default()).unwrap();
    assert_abs_diff_eq!(at_loss(&net, &x, &y, 1.0, &attack()).unwrap().total, ce_adv.total, epsilon = 1e-12);

    // In between, the loss is the stated mix of its two terms. An NF model has
    // no batch coupling, so its terms equal the separate cross-entropies.
    let nf = Network::new(mlp(NormStrategy::Nf), 1).unwrap();
    let cfg = TrainConfig {
        method: MethodKind::Nofrost,
        ..cfg_for(MethodKind::Nofrost)
    };
    let v = method_loss(&nf, &cfg, &x, &y, None).unwrap();
    let (c, a) = (v.terms[0].1, v.terms[1].1);
    assert_abs_diff_eq!(v.total, 0.5 * c + 0.5 * a, epsilon = 1e-12);
    let prep = prepare(&nf, &cfg, &x, &y, cfg.attack.seed, None, 0).unwrap();
    let st_nf = |t: &Tensor| loss_value(&nf, &cfg_for(MethodKind::St), t, &y, &Default::default()).unwrap().total;
    assert_abs_diff_eq!(c, st_nf(&x), epsilon = 1e-12);
    assert_abs_diff_eq!(a, st_nf(prep.x_adv.as_ref().unwrap()), epsilon = 1e-12);
    assert!(a > c);
}

#[test]
fn trades_reductions() {
    let net = Network::new(mlp(NormStrategy::Bn), 2).unwrap();
    let (x, y) = batch(6, 2);
    let st = loss_value(&net, &cfg_for(MethodKind::St), &x, &y, &Default::default()).unwrap().total;
    assert_eq!(trades_loss(&net, &x, &y, 0.0, &attack()).unwrap().total, st);
    let nf = Network::new(mlp(NormStrategy::Nf), 2).unwrap();
    let st_nf = loss_value(&nf, &cfg_for(MethodKind::St), &x, &y, &Default::default()).unwrap().total;
    let v = trades_loss(&nf, &x, &y, 1.0, &zero_attack()).unwrap();
    assert_abs_diff_eq!(v.terms[1].1, 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(v.total, st_nf, epsilon = 1e-12);
    let v = trades_loss(&nf, &x, &y, 2.0, &attack()).unwrap();
    assert_abs_diff_eq!(v.total, v.terms[0].1 + 2.0 * v.terms[1].1, epsilon = 1e-12);
    assert!(v.terms[1].1 > 0.0);
}

#[test]
fn nofrost_star_reductions() {
    let nf = Network::new(mlp(NormStrategy::Nf), 3).unwrap();
    let (x, y) = batch(6, 3);
    let st = loss_value(&nf, &cfg_for(MethodKind::St), &x, &y, &Default::default()).unwrap().total;
    let id = Augmenter::identity(1);
    let v = nofrost_star_loss(&nf, &x, &y, &id, &zero_attack(), 9).unwrap();
    assert_abs_diff_eq!(v.total, st, epsilon = 1e-12);
    let aug = Augmenter::new(1, DeepAugmentConfig::default(), crate::augment::TdaConfig::default(), 4).unwrap();
    let v = nofrost_star_loss(&nf, &x, &y, &aug, &attack(), 9).unwrap();
    let mean = v.terms.iter().map(|t| t.1).sum::<f64>() / 3.0;
    assert_abs_diff_eq!(v.total, mean, epsilon = 1e-12);
    assert!(nofrost_star_loss(&Network::new(mlp(NormStrategy::Bn), 3).unwrap(), &x, &y, &aug, &attack(), 9).is_err());
}

/// Central differences of the loss of `method` with respect to every parameter
/// scalar, with the prepared batches held fixed.
fn check_gradients(method: MethodKind, norm: NormStrategy) {
    let mut net = Network::new(mlp(norm), 11).unwrap();
    let (x, y) = batch(5, 11);
    let cfg = cfg_for(method);
    let aug = Augmenter::new(1, DeepAugmentConfig::default(), crate::augment::TdaConfig::default(), 4).unwrap();
    let prep = prepare(&net, &cfg, &x, &y, 3, Some(&aug), 4).unwrap();
    let g = Graph::new();
    let pv = net.params().bind(&g, true);
    let built = build_loss(&g, &pv, &net, &cfg, &x, &y, &prep).unwrap();
    let mut grads = g.backward(built.loss).unwrap();
    let analytic: Vec<Tensor> = pv.iter().map(|v| grads.take(*v).unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))).collect();
    drop(built);
    drop(pv);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..net.params().len() {
        let base = (*net.params().get(i).value).clone();
        for k in 0..base.len() {
            let mut eval = |d: f64| {
                let mut w = base.clone();
                w.as_slice_mut().unwrap()[k] += d;
                net.params_mut().set(i, w);
                loss_value(&net, &cfg, &x, &y, &prep).unwrap().total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic[i].as_slice().unwrap()[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(err);
        }
        net.params_mut().set(i, base);
    }
    assert!(worst < 1e-3, "{method} on {norm}: worst relative error {worst}");
}

#[test]
fn every_method_matches_finite_differences() {
    for m in MethodKind::ALL {
        let norm = match m {
            MethodKind::Nofrost | MethodKind::NofrostStar => NormStrategy::Nf,
            MethodKind::Mbnat => NormStrategy::Mbn,
            _ => NormStrategy::Bn,
        };
        check_gradients(m, norm);
    }
    check_gradients(MethodKind::Sat, NormStrategy::Nf);
}

#[test]
fn nofrost_star_gradient_is_mean_of_term_gradients() {
    let net = Network::new(mlp(NormStrategy::Nf), 12).unwrap();
    let (x, y) = batch(5, 12);
    let cfg = cfg_for(MethodKind::NofrostStar);
    let aug = Augmenter::new(1, DeepAugmentConfig::default(), crate::augment::TdaConfig::default(), 4).unwrap();
    let prep = prepare(&net, &cfg, &x, &y, 3, Some(&aug), 4).unwrap();
    let grad_of = |t: &Tensor| {
        let g = Graph::new();
        let pv = net.params().bind(&g, true);
        let b = build_loss(&g, &pv, &net, &cfg_for(MethodKind::St), t, &y, &Default::default()).unwrap();
        let mut gr = g.backward(b.loss).unwrap();
        pv.iter().map(|v| gr.take(*v).unwrap()).collect::<Vec<_>>()
    };
    let parts = [grad_of(&x), grad_of(prep.x_aug.as_ref().unwrap()), grad_of(prep.x_adv.as_ref().unwrap())];
    let g = Graph::new();
    let pv = net.params().bind(&g, true);
    let b = build_loss(&g, &pv, &net, &cfg, &x, &y, &prep).unwrap();
    let mut gr = g.backward(b.loss).unwrap();
    for (i, v) in pv.iter().enumerate() {
        let total = gr.take(*v).unwrap();
        let mean = (&parts[0][i] + &parts[1][i] + &parts[2][i]) / 3.0;
        for (a, b) in total.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

fn quick(method: MethodKind, norm: NormStrategy, epochs: usize) -> (ModelConfig, Dataset, TrainConfig) {
    let model = ModelConfig {
        input_shape: [1, 1, 2],
        num_classes: 2,
        width: 8,
        ..mlp(norm)
    };
    let cfg = TrainConfig {
        method,
        epochs,
        batch_size: 16,
        lr0: 0.1,
        eval_samples: 64,
        eval_attack: AttackConfig::pgd(0.1, 5),
        ..cfg_for(method)
    };
    (model, separable(64, 1), cfg)
}

#[test]
fn endpoint_traces_match_standard_training() {
    let (model, data, st) = quick(MethodKind::St, NormStrategy::Bn, 2);
    let base = train(&model, &data, None, &st).unwrap().step_losses;
    for cfg in [
        TrainConfig {
            method: MethodKind::Sat,
            lambda: 0.0,
            ..st.clone()
        },
        TrainConfig {
            method: MethodKind::Trades,
            trades_beta: 0.0,
            ..st.clone()
        },
    ] {
        let trace = train(&model, &data, None, &cfg).unwrap().step_losses;
        assert_eq!(trace.len(), base.len());
        for (a, b) in trace.iter().zip(&base) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn standard_training_fits_separable_data_deterministically() {
    let (model, data, cfg) = quick(MethodKind::St, NormStrategy::Bn, 20);
    let a = train(&model, &data, None, &cfg).unwrap();
    assert!(a.history.last().unwrap().clean_acc >= 99.0, "{:?}", a.history.last());
    assert!(a.history.iter().all(|r| r.pgd_acc.is_none()));
    let b = train(&model, &data, None, &cfg).unwrap();
    for (p, q) in a.network.params().iter().zip(b.network.params().iter()) {
        let bits = |t: &Tensor| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value), "{}", p.name);
    }
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn mbnat_keeps_banks_apart() {
    let model = ModelConfig {
        input_shape: [1, 1, 2],
        num_classes: 2,
        ..mlp(NormStrategy::Mbn)
    };
    let data = separable(32, 3);
    let bank = |net: &Network, b: Branch| match &net.site_stats()[0] {
        SiteStats::Mbn(st) => st.bank(b).clone(),
        _ => unreachable!(),
    };
    let fresh = Network::new(model.clone(), 0).unwrap();
    for (lambda, untouched, touched) in [(0.0, Branch::Adv, Branch::Clean), (1.0, Branch::Clean, Branch::Adv)] {
        let cfg = TrainConfig {
            method: MethodKind::Mbnat,
            lambda,
            epochs: 1,
            batch_size: 8,
            eval_samples: 8,
            ..cfg_for(MethodKind::Mbnat)
        };
        let out = train(&model, &data, None, &cfg).unwrap();
        assert_eq!(bank(&out.network, untouched), bank(&fresh, untouched));
        assert_ne!(bank(&out.network, touched), bank(&fresh, touched));
        // The affine parameters of the unused branch keep their initial values.
        let name = format!("norm.0.{}.scale", untouched.name());
        assert_eq!(out.network.params().by_name(&name).unwrap().value, fresh.params().by_name(&name).unwrap().value);
    }
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let (model, data, cfg) = quick(MethodKind::St, NormStrategy::None, 3);
    let cfg = TrainConfig { lr0: 1e200, ..cfg };
    match train(&model, &data, None, &cfg) {
        Err(crate::Error::Diverged { last_good, .. }) => {
            let ck = last_good.expect("a checkpoint is kept");
            assert!(ck.to_network().is_ok());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (model, data, cfg) = quick(MethodKind::Sat, NormStrategy::Bn, 3);
    let full = train(&model, &data, None, &cfg).unwrap();
    let mut first: Option<crate::nfcore::Checkpoint> = None;
    let mut stop = |r: &EpochRecord, ck: &crate::nfcore::Checkpoint| {
        if r.epoch == 1 {
            first = Some(ck.clone());
            return Err(crate::error::arg_err("interrupted"));
        }
        Ok(())
    };
    assert!(train_with(&model, &data, None, &cfg, None, &mut stop).is_err());
    let ck = first.unwrap();
    let ck = crate::nfcore::Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let resumed = train_with(&model, &data, None, &cfg, Some(&ck), &mut |_, _| Ok(())).unwrap();
    assert_eq!(resumed.history.len(), 3);
    for (p, q) in full.network.params().iter().zip(resumed.network.params().iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.epoch, r.train_loss, r.clean_acc, r.pgd_acc)).collect::<Vec<_>>();
    assert_eq!(strip(&full.history), strip(&resumed.history));
    let other = TrainConfig { seed: 99, ..cfg };
    assert!(train_with(&model, &data, None, &other, Some(&ck), &mut |_, _| Ok(())).is_err());
}

#[test]
fn agc_run_is_finite_and_differs() {
    let (model, data, cfg) = quick(MethodKind::Nofrost, NormStrategy::Nf, 1);
    let plain = train(&model, &data, None, &cfg).unwrap();
    let clipped = train(&model, &data, None, &TrainConfig { agc_lambda: Some(1e-4), ..cfg }).unwrap();
    assert!(clipped.step_losses.iter().all(|l| l.is_finite()));
    assert_ne!(plain.step_losses, clipped.step_losses);
}
