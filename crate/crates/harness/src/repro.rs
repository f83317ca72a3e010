//! The desk-scale reproduction suite: twelve criteria, each reported as
//! pass or fail with the measured numbers.
//!
//! Trained models are shared between criteria through a [`Zoo`] whose slots
//! are filled at most once. Every tolerance lives in [`tol`].

use std::path::Path;
use std::sync::OnceLock;

use ndarray::{ArrayD, IxDyn};
use nofrost::analysis::{
    bn_stats_scatter, compute_metrics, gamma_grid, ks_two_sample, spearman, thickness_from_profile, AttackSpec,
    EvalConfig, InterpolationStrategy, MetricConfig, ThicknessConfig,
};
use nofrost::attacks::{eps_from_255, project_linf, run_attack, AttackConfig, EvalView, LinearClassifier, LossKind};
use nofrost::augment::{CorruptionKind, CorruptionSpec};
use nofrost::autograd::{Graph, Tensor};
use nofrost::data::MoonsConfig;
use nofrost::nfcore::{scaled_weight_standardize, Network, NormStrategy};
use nofrost::objectives::{train, MethodKind, TrainConfig};
use nofrost::seeding;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DataSection, ExperimentConfig};
use crate::datasets::{load_dataset, Splits};
use crate::error::Result;
use crate::plot::{render, PlotKind, Table};
use crate::run::evaluate_model;
use crate::sweep::{eps_sweep, EPS_GRID};

/// Pinned tolerances of the twelve criteria.
pub mod tol {
    /// 1: largest per-row mean of a standardized weight.
    pub const SWS_MEAN: f64 = 1e-6;
    /// 1: largest deviation of the row std from `gain / sqrt(fan_in)`.
    pub const SWS_STD: f64 = 1e-4;
    /// 1: relative error of the SWS gradient against central differences.
    pub const SWS_GRAD_REL: f64 = 1e-4;
    /// 2: randomized attack trials.
    pub const ATTACK_TRIALS: usize = 10_000;
    /// 2: slack on the l-infinity and pixel-range checks.
    pub const CONTAINMENT_SLACK: f64 = 1e-12;
    /// 3, 7: largest PGD accuracy (%) of standard-trained models.
    pub const ST_PGD_MAX: f64 = 5.0;
    /// 4: largest KS p-value.
    pub const KS_P_MAX: f64 = 0.05;
    /// 5: Spearman bounds over the gamma grid.
    pub const SPEARMAN_CLEAN_MAX: f64 = -0.8;
    pub const SPEARMAN_ROBUST_MIN: f64 = 0.8;
    /// 6: BN clean drop must exceed the NF clean drop by this many points.
    pub const DROP_GAP_MIN: f64 = 2.0;
    /// 6: NoFrost PGD accuracy may trail SAT-BN by at most this much.
    pub const PGD_SLACK: f64 = 1.0;
    /// 8: largest allowed increase (points) between consecutive radii.
    pub const EPS_VIOLATION: f64 = 0.5;
    /// 9: quadrature vs closed-form thickness.
    pub const THICKNESS_ORACLE: f64 = 1e-2;
    /// 10: per-step loss difference of reduced methods against ST.
    pub const TRACE: f64 = 1e-6;
    /// 11: a column counts as won at this margin (points) ...
    pub const COMPREHENSIVE_MARGIN: f64 = 1.0;
    /// ... and this many of the five columns must be won.
    pub const COMPREHENSIVE_WINS: usize = 3;
    /// 12: largest std (points, n - 1 denominator) of NoFrost clean accuracy.
    pub const SEED_STD_MAX: f64 = 1.0;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Criterion {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2}: {} | {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

/// Sizes and schedule of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    /// Dataset, model and training settings shared by every trained model;
    /// the method and norm are set per model.
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// PGD accuracy is measured with 20 steps at this radius (0-255).
    pub eval_eps: f64,
    /// Samples used by the per-sample metrics of criterion 9.
    pub metric_limit: usize,
    /// Training set size and epochs of the loss-trace runs of criterion 10.
    pub trace_samples: usize,
    pub trace_epochs: usize,
    /// Corruption severity of criterion 11.
    pub severity: u8,
}

impl Recipe {
    /// The full desk-scale suite on the synthetic benchmark (a few minutes
    /// on one core).
    pub fn desk() -> Self {
        let mut base = ExperimentConfig::synthetic("repro", MethodKind::Sat);
        base.data = DataSection {
            train_size: 2000,
            test_size: 500,
            moons: MoonsConfig::default(),
            ..DataSection::default()
        };
        Self {
            base,
            seeds: vec![0, 1, 2],
            eval_eps: 8.0,
            metric_limit: 200,
            trace_samples: 256,
            trace_epochs: 2,
            severity: 3,
        }
    }

    /// Tiny smoke version; its verdicts carry no meaning.
    pub fn quick() -> Self {
        let mut r = Self::desk();
        r.base.data.train_size = 128;
        r.base.data.test_size = 64;
        r.base.train.epochs = 1;
        r.base.train.eval_samples = 32;
        r.base.train.attack.steps = 2;
        r.base.train.eval_attack.steps = 2;
        r.metric_limit = 16;
        r.trace_samples = 64;
        r.trace_epochs = 1;
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelKey {
    pub method: MethodKind,
    pub norm: NormStrategy,
    pub seed: u64,
}

impl ModelKey {
    pub fn label(&self) -> String {
        format!("{}-{}-s{}", self.method, self.norm, self.seed)
    }
}

/// Models of the suite, each trained on first use.
pub struct Zoo {
    pub recipe: Recipe,
    pub data: Splits,
    slots: Vec<(ModelKey, OnceLock<Network>)>,
    /// Called with the model label before each training run.
    pub on_train: Option<Box<dyn Fn(&str) + Sync>>,
}

impl Zoo {
    pub fn new(recipe: Recipe) -> Result<Self> {
        let data = load_dataset(&recipe.base)?;
        let mut slots = Vec::new();
        let mut add = |method, norm, seed| {
            slots.push((ModelKey { method, norm, seed }, OnceLock::new()));
        };
        for &s in &recipe.seeds {
            add(MethodKind::St, NormStrategy::Bn, s);
            add(MethodKind::Sat, NormStrategy::Bn, s);
            add(MethodKind::St, NormStrategy::Nf, s);
            add(MethodKind::Nofrost, NormStrategy::Nf, s);
        }
        let s0 = recipe.seeds[0];
        add(MethodKind::Pgdat, NormStrategy::Bn, s0);
        add(MethodKind::Mbnat, NormStrategy::Mbn, s0);
        add(MethodKind::NofrostStar, NormStrategy::Nf, s0);
        add(MethodKind::Combine, NormStrategy::Bn, s0);
        Ok(Self {
            recipe,
            data,
            slots,
            on_train: None,
        })
    }

    pub fn config(&self, key: ModelKey) -> ExperimentConfig {
        let mut c = self.recipe.base.clone();
        c.name = key.label();
        c.seed = key.seed;
        c.train.method = key.method;
        c.model.norm = Some(key.norm);
        c
    }

    pub fn get(&self, key: ModelKey) -> Result<&Network> {
        let slot = self
            .slots
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, s)| s)
            .unwrap_or_else(|| panic!("model {} is not part of the zoo", key.label()));
        if let Some(n) = slot.get() {
            return Ok(n);
        }
        if let Some(cb) = &self.on_train {
            cb(&key.label());
        }
        let cfg = self.config(key);
        let model = cfg.model_config(Some(&self.data.train))?;
        let out = train(&model, &self.data.train, Some(&self.data.test), &cfg.train_config()?)?;
        Ok(slot.get_or_init(|| out.network))
    }

    fn pgd20(&self) -> AttackSpec {
        AttackSpec::new("pgd20", AttackConfig::pgd(eps_from_255(self.recipe.eval_eps), 20))
    }

    /// Clean and PGD-20 accuracy on the test split.
    pub fn accuracy(&self, key: ModelKey) -> Result<(f64, f64)> {
        let net = self.get(key)?;
        let cfg = EvalConfig {
            attacks: vec![self.pgd20()],
            seed: key.seed,
            ..EvalConfig::clean_only()
        };
        let r = evaluate_model(net, key.method, &self.data.test, &cfg)?;
        Ok((r.clean_acc, r.per_attack_acc["pgd20"]))
    }
}

fn key(method: MethodKind, norm: NormStrategy, seed: u64) -> ModelKey {
    ModelKey { method, norm, seed }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for one value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// 1: SWS row statistics and gradient on random weights of several shapes.
pub fn criterion_sws() -> Result<Criterion> {
    let mut rng = seeding::rng(0x5_u64, &[1]);
    let (mut worst_mean, mut worst_std, mut worst_grad) = (0.0f64, 0.0f64, 0.0f64);
    let shapes: [&[usize]; 5] = [&[4, 3, 3, 3], &[8, 4, 3, 3], &[16, 8, 1, 1], &[5, 7], &[3, 64]];
    for (k, shape) in shapes.iter().enumerate() {
        let gain = 0.5 + k as f64 * 0.4;
        let w = normal_tensor(&mut rng, shape, 1.0 + k as f64);
        let fan: usize = shape[1..].iter().product();
        let s = scaled_weight_standardize(&w, gain, 1e-8)?;
        for row in s.outer_iter() {
            let v: Vec<f64> = row.iter().copied().collect();
            let m = mean(&v);
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((sd - gain / (fan as f64).sqrt()).abs());
        }
        // d/dw of sum(c * sws(w)) against central differences.
        let c = normal_tensor(&mut rng, shape, 1.0);
        let loss = |w: &Tensor| -> Result<f64> {
            Ok(scaled_weight_standardize(w, gain, 1e-8)?.iter().zip(c.iter()).map(|(a, b)| a * b).sum())
        };
        let g = Graph::new();
        let wv = g.leaf(w.clone(), true);
        let sv = g.sws(wv, gain, 1e-8)?;
        let cv = g.constant(c.clone());
        let l = g.sum(g.mul(sv, cv)?);
        let grads = g.backward(l)?;
        let analytic = grads.get_or_zeros(wv);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().expect("standard")[i] += h;
            wm.as_slice_mut().expect("standard")[i] -= h;
            let fd = (loss(&wp)? - loss(&wm)?) / (2.0 * h);
            let a = analytic.as_slice().expect("standard")[i];
            worst_grad = worst_grad.max((a - fd).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
    }
    Ok(Criterion {
        id: 1,
        name: "SWS invariants",
        pass: worst_mean <= tol::SWS_MEAN && worst_std <= tol::SWS_STD && worst_grad <= tol::SWS_GRAD_REL,
        detail: format!(
            "max |row mean| {worst_mean:.2e} (<= {:.0e}), max std error {worst_std:.2e} (<= {:.0e}), max grad rel err {worst_grad:.2e} (<= {:.0e})",
            tol::SWS_MEAN,
            tol::SWS_STD,
            tol::SWS_GRAD_REL
        ),
    })
}

/// 2: randomized attacks on random linear models stay inside the ball and
/// the pixel range and repeat bitwise.
pub fn criterion_attacks(trials: usize) -> Result<Criterion> {
    let mut rng = seeding::rng(0x2_u64, &[2]);
    let (mut ball, mut range, mut repeat) = (0usize, 0usize, 0usize);
    for t in 0..trials {
        let k = rng.random_range(2..5);
        let d = rng.random_range(2..9);
        let n = rng.random_range(1..4);
        let model = LinearClassifier {
            w: normal_tensor(&mut rng, &[k, d], 3.0),
            b: normal_tensor(&mut rng, &[k], 1.0),
        };
        let x = ArrayD::from_shape_fn(IxDyn(&[n, d]), |_| rng.random_range(0.0..=1.0));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let eps = eps_from_255(rng.random_range(0.0..16.0));
        let steps = rng.random_range(1..6);
        let mut cfg = match t % 4 {
            0 => AttackConfig::pgd(eps, steps),
            1 => AttackConfig::cw(eps, steps),
            2 => AttackConfig::mia(eps, steps),
            _ => AttackConfig::targeted(eps, steps),
        };
        cfg.step_size = rng.random_range(0.001..0.05);
        cfg.random_init = rng.random_bool(0.5);
        cfg.seed = rng.random();
        if t % 7 == 0 && cfg.loss_kind != LossKind::TargetedCrossEntropy {
            cfg.early_stop_extra_steps = Some(rng.random_range(0..3));
        }
        let a = run_attack(&model, &x, &y, &cfg)?;
        let b = run_attack(&model, &x, &y, &cfg)?;
        if a.x_star.iter().zip(b.x_star.iter()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            repeat += 1;
        }
        if a.x_star.iter().zip(x.iter()).any(|(p, q)| (p - q).abs() > eps + tol::CONTAINMENT_SLACK) {
            ball += 1;
        }
        if a.x_star.iter().any(|p| *p < -tol::CONTAINMENT_SLACK || *p > 1.0 + tol::CONTAINMENT_SLACK) {
            range += 1;
        }
    }
    // The projection itself on adversarially placed points.
    for _ in 0..trials / 10 {
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 6]), |_| rng.random_range(0.0..=1.0));
        let far = ArrayD::from_shape_fn(IxDyn(&[1, 6]), |_| rng.random_range(-1.0..2.0));
        let eps = rng.random_range(0.0..0.1);
        let p = project_linf(&far, &x, eps, (0.0, 1.0))?;
        if p.iter().zip(x.iter()).any(|(a, b)| (a - b).abs() > eps + tol::CONTAINMENT_SLACK) {
            ball += 1;
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            range += 1;
        }
    }
    Ok(Criterion {
        id: 2,
        name: "attack containment and determinism",
        pass: ball == 0 && range == 0 && repeat == 0,
        detail: format!("{trials} trials: {ball} ball violations, {range} range violations, {repeat} non-repeatable"),
    })
}

/// 3 and 7: a standard-trained model with `norm` collapses under PGD.
pub fn criterion_st_collapse(zoo: &Zoo, norm: NormStrategy) -> Result<Criterion> {
    let s = zoo.recipe.seeds[0];
    let (clean, pgd) = zoo.accuracy(key(MethodKind::St, norm, s))?;
    let (id, name) = if norm == NormStrategy::Nf {
        (7, "NF-ST is not robust")
    } else {
        (3, "ST collapses under attack")
    };
    Ok(Criterion {
        id,
        name,
        pass: pgd < tol::ST_PGD_MAX,
        detail: format!("ST-{norm} clean {clean:.2}%, PGD-20 {pgd:.2}% (< {})", tol::ST_PGD_MAX),
    })
}

/// 4: BN running means of clean-only and adversarial-only training differ.
/// Writes `probe.csv` and `probe.svg` to `out` when given.
pub fn criterion_probe(zoo: &Zoo, out: Option<&Path>) -> Result<Criterion> {
    let s = zoo.recipe.seeds[0];
    let clean = zoo.get(key(MethodKind::St, NormStrategy::Bn, s))?;
    let adv = zoo.get(key(MethodKind::Pgdat, NormStrategy::Bn, s))?;
    let layer = clean.config().probe_layer();
    let a = bn_stats_scatter(clean, layer, "clean (st)", None)?;
    let b = bn_stats_scatter(adv, layer, "adversarial (pgdat)", None)?;
    let ks = ks_two_sample(&a.means(), &b.means())?;
    let ks_var = ks_two_sample(&a.variances(), &b.variances())?;
    if let Some(dir) = out {
        let mut t = Table {
            headers: ["source", "mean", "var"].map(String::from).to_vec(),
            rows: Vec::new(),
        };
        for s in [&a, &b] {
            for (m, v) in &s.points {
                t.rows.push(vec![s.source_label.clone(), m.to_string(), v.to_string()]);
            }
        }
        crate::run::write_csv(&dir.join("probe.csv"), &t.headers, &t.rows)?;
        std::fs::write(dir.join("probe.svg"), render(PlotKind::Scatter, &[t], None)?)?;
    }
    Ok(Criterion {
        id: 4,
        name: "mixture-distribution probe",
        pass: ks.p_value < tol::KS_P_MAX,
        detail: format!(
            "layer {layer}, {} channels: running means KS D = {:.3}, p = {:.4} ({}) (< {}); running variances (not scored) D = {:.3}, p = {:.2e}",
            a.points.len(),
            ks.statistic,
            ks.p_value,
            if ks.exact { "exact" } else { "asymptotic" },
            tol::KS_P_MAX,
            ks_var.statistic,
            ks_var.p_value
        ),
    })
}

/// 5: on an MBNAT model clean accuracy falls and robust accuracy rises with gamma.
pub fn criterion_tradeoff(zoo: &Zoo, out: Option<&Path>) -> Result<Criterion> {
    let s = zoo.recipe.seeds[0];
    let net = zoo.get(key(MethodKind::Mbnat, NormStrategy::Mbn, s))?;
    let gammas = gamma_grid(11);
    let atk = zoo.pgd20();
    let pts = crate::sweep::gamma_sweep(net, &zoo.data.test, &gammas, &atk, &InterpolationStrategy::All, 128, s)?;
    let clean: Vec<f64> = pts.iter().map(|p| p.clean_acc).collect();
    let robust: Vec<f64> = pts.iter().map(|p| p.robust_acc["pgd20"]).collect();
    if let Some(dir) = out {
        let (h, rows) = crate::sweep::gamma_rows("all", "pgd20", &pts);
        crate::run::write_csv(&dir.join("tradeoff.csv"), &h, &rows)?;
        let t = Table { headers: h, rows };
        std::fs::write(dir.join("tradeoff.svg"), render(PlotKind::Interpolation, &[t], None)?)?;
    }
    let (rc, rr) = (spearman(&clean, &gammas), spearman(&robust, &gammas));
    let (pass, detail) = match (rc, rr) {
        (Ok(rc), Ok(rr)) => (
            rc <= tol::SPEARMAN_CLEAN_MAX && rr >= tol::SPEARMAN_ROBUST_MIN,
            format!(
                "Spearman(clean, gamma) {rc:.3} (<= {}), Spearman(PGD, gamma) {rr:.3} (>= {}); clean {:.1}->{:.1}, PGD {:.1}->{:.1}",
                tol::SPEARMAN_CLEAN_MAX,
                tol::SPEARMAN_ROBUST_MIN,
                clean[0],
                clean[10],
                robust[0],
                robust[10]
            ),
        ),
        _ => (false, format!("constant accuracy over gamma: clean {clean:?}, PGD {robust:?}")),
    };
    Ok(Criterion {
        id: 5,
        name: "MBN trade-off trend",
        pass,
        detail,
    })
}

/// Clean and PGD accuracy of one method/norm pair over the recipe seeds.
pub fn seed_table(zoo: &Zoo, method: MethodKind, norm: NormStrategy) -> Result<Vec<(f64, f64)>> {
    zoo.recipe.seeds.iter().map(|&s| zoo.accuracy(key(method, norm, s))).collect()
}

/// 6: the central claim, with means over the recipe seeds.
pub fn criterion_central(zoo: &Zoo) -> Result<Criterion> {
    let st_bn = seed_table(zoo, MethodKind::St, NormStrategy::Bn)?;
    let sat_bn = seed_table(zoo, MethodKind::Sat, NormStrategy::Bn)?;
    let st_nf = seed_table(zoo, MethodKind::St, NormStrategy::Nf)?;
    let nofrost = seed_table(zoo, MethodKind::Nofrost, NormStrategy::Nf)?;
    let m = |t: &[(f64, f64)], robust: bool| mean(&t.iter().map(|p| if robust { p.1 } else { p.0 }).collect::<Vec<_>>());
    let bn_drop = m(&st_bn, false) - m(&sat_bn, false);
    let nf_drop = m(&st_nf, false) - m(&nofrost, false);
    let (pgd_nf, pgd_bn) = (m(&nofrost, true), m(&sat_bn, true));
    Ok(Criterion {
        id: 6,
        name: "central claim (clean drop, robustness)",
        pass: bn_drop - nf_drop >= tol::DROP_GAP_MIN && pgd_nf >= pgd_bn - tol::PGD_SLACK,
        detail: format!(
            "clean drop BN {bn_drop:.2} vs NF {nf_drop:.2} (gap {:.2}, needs >= {}); PGD NoFrost {pgd_nf:.2} vs SAT-BN {pgd_bn:.2} (needs >= SAT-BN - {}); {} seeds",
            bn_drop - nf_drop,
            tol::DROP_GAP_MIN,
            tol::PGD_SLACK,
            zoo.recipe.seeds.len()
        ),
    })
}

/// Largest increase of robust accuracy between consecutive radii.
pub fn worst_increase(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| w[1].1 - w[0].1).fold(0.0, f64::max)
}

/// 8: robust accuracy does not grow with the radius (SAT-BN and NoFrost).
pub fn criterion_eps(zoo: &Zoo, out: Option<&Path>) -> Result<Criterion> {
    let s = zoo.recipe.seeds[0];
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for k in [key(MethodKind::Sat, NormStrategy::Bn, s), key(MethodKind::Nofrost, NormStrategy::Nf, s)] {
        let pts = eps_sweep(zoo.get(k)?, k.method, &zoo.data.test, &EPS_GRID, 20, 128, s)?;
        worst = worst.max(worst_increase(&pts));
        parts.push(format!(
            "{}: {}",
            k.label(),
            pts.iter().map(|(e, a)| format!("{e}:{a:.1}")).collect::<Vec<_>>().join(" ")
        ));
        rows.extend(crate::sweep::eps_rows(&k.label(), &pts).1);
    }
    if let Some(dir) = out {
        let h = ["series", "eps", "robust_acc"].map(String::from).to_vec();
        crate::run::write_csv(&dir.join("eps_sweep.csv"), &h, &rows)?;
        let t = Table { headers: h, rows };
        std::fs::write(dir.join("eps_sweep.svg"), render(PlotKind::EpsSweep, &[t], None)?)?;
    }
    Ok(Criterion {
        id: 8,
        name: "eps-sweep monotonicity",
        pass: worst <= tol::EPS_VIOLATION,
        detail: format!("largest increase {worst:.2} (<= {}); {}", tol::EPS_VIOLATION, parts.join("; ")),
    })
}

/// Closed-form thickness of the toy profile `g(t) = tanh(k (t - c))` on a
/// unit segment: the set where `alpha < g < beta` is an interval.
pub fn toy_thickness(k: f64, c: f64, alpha: f64, beta: f64) -> f64 {
    let lo = (c + alpha.atanh() / k).clamp(0.0, 1.0);
    let hi = (c + beta.atanh() / k).clamp(0.0, 1.0);
    hi - lo
}

/// 9: NoFrost has larger margins and thicker boundaries than SAT-BN; the
/// thickness quadrature matches closed forms.
pub fn criterion_metrics(zoo: &Zoo, out: Option<&Path>) -> Result<Criterion> {
    let s = zoo.recipe.seeds[0];
    let cfg = MetricConfig {
        limit: zoo.recipe.metric_limit,
        ..MetricConfig::default()
    };
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    for k in [key(MethodKind::Nofrost, NormStrategy::Nf, s), key(MethodKind::Sat, NormStrategy::Bn, s)] {
        let net = zoo.get(k)?;
        let m = compute_metrics(&EvalView::new(net, k.method.eval_routings().0), &zoo.data.test, &cfg, 128, s)?;
        for (metric, vals) in [("margin", &m.margins), ("thickness", &m.thickness), ("smoothness", &m.smoothness)] {
            rows.extend(vals.iter().map(|v| vec![k.label(), metric.to_string(), v.to_string()]));
        }
        summaries.push(m);
    }
    if let Some(dir) = out {
        let h = ["series", "metric", "value"].map(String::from).to_vec();
        crate::run::write_csv(&dir.join("metrics.csv"), &h, &rows)?;
        let t = Table { headers: h, rows };
        std::fs::write(
            dir.join("margins.svg"),
            render(PlotKind::Histogram, &[t.filter("metric", "margin")?], Some("Decision margin"))?,
        )?;
    }
    let th = ThicknessConfig::default();
    let mut oracle_err: f64 = 0.0;
    for (k, c) in [(4.0, 0.5), (8.0, 0.3), (2.5, 0.6), (12.0, 0.45)] {
        let q = thickness_from_profile(1.0, &th, |t| (k * (t - c)).tanh())?;
        oracle_err = oracle_err.max((q - toy_thickness(k, c, th.alpha, th.beta)).abs());
    }
    let (nf, bn) = (&summaries[0], &summaries[1]);
    Ok(Criterion {
        id: 9,
        name: "metric ordering",
        pass: nf.margin_mean > bn.margin_mean && nf.thickness_mean > bn.thickness_mean && oracle_err <= tol::THICKNESS_ORACLE,
        detail: format!(
            "margin NoFrost {:.4} vs SAT-BN {:.4}; thickness {:.4} vs {:.4}; smoothness {:.4} vs {:.4}; quadrature error {oracle_err:.1e} (<= {:.0e}); n = {}",
            nf.margin_mean,
            bn.margin_mean,
            nf.thickness_mean,
            bn.thickness_mean,
            nf.smoothness_mean,
            bn.smoothness_mean,
            tol::THICKNESS_ORACLE,
            nf.n_samples
        ),
    })
}

/// Largest per-step loss difference between `cfg` and the same run as ST.
pub fn trace_gap(zoo: &Zoo, cfg: &TrainConfig) -> Result<f64> {
    let data = zoo.data.train.slice(0, zoo.recipe.trace_samples.min(zoo.data.train.len()));
    let mut exp = zoo.recipe.base.clone();
    exp.model.norm = Some(NormStrategy::Bn);
    let model = exp.model_config(Some(&data))?;
    let st = TrainConfig {
        method: MethodKind::St,
        ..cfg.clone()
    };
    let a = train(&model, &data, None, cfg)?.step_losses;
    let b = train(&model, &data, None, &st)?.step_losses;
    if a.len() != b.len() {
        return Ok(f64::INFINITY);
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// 10: SAT with lambda 0 and TRADES with beta 0 reproduce the ST loss trace.
pub fn criterion_endpoints(zoo: &Zoo) -> Result<Criterion> {
    let mut base = zoo.recipe.base.clone();
    base.train.epochs = zoo.recipe.trace_epochs;
    base.train.eval_samples = 0;
    let tc = base.train_config()?;
    let sat = TrainConfig {
        method: MethodKind::Sat,
        lambda: 0.0,
        ..tc.clone()
    };
    let trades = TrainConfig {
        method: MethodKind::Trades,
        trades_beta: 0.0,
        ..tc
    };
    let (gs, gt) = (trace_gap(zoo, &sat)?, trace_gap(zoo, &trades)?);
    Ok(Criterion {
        id: 10,
        name: "endpoint reductions",
        pass: gs <= tol::TRACE && gt <= tol::TRACE,
        detail: format!("max per-step |loss - ST loss|: SAT(lambda=0) {gs:.1e}, TRADES(beta=0) {gt:.1e} (<= {:.0e})", tol::TRACE),
    })
}

/// 11: NoFrost* beats Combine on the corruption suite plus PGD.
pub fn criterion_comprehensive(zoo: &Zoo) -> Result<Criterion> {
    let s = zoo.recipe.seeds[0];
    let sev = zoo.recipe.severity;
    let cfg = EvalConfig {
        attacks: vec![zoo.pgd20()],
        corruptions: CorruptionKind::ALL.iter().map(|&k| CorruptionSpec::new(k, sev)).collect(),
        seed: s,
        ..EvalConfig::clean_only()
    };
    let mut reports = Vec::new();
    for k in [key(MethodKind::NofrostStar, NormStrategy::Nf, s), key(MethodKind::Combine, NormStrategy::Bn, s)] {
        reports.push(evaluate_model(zoo.get(k)?, k.method, &zoo.data.test, &cfg)?);
    }
    let cols = |r: &nofrost::analysis::EvalReport| -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = r.per_corruption_acc.iter().map(|(k, a)| (k.clone(), *a)).collect();
        v.push(("pgd20".into(), r.per_attack_acc["pgd20"]));
        v
    };
    let (a, b) = (cols(&reports[0]), cols(&reports[1]));
    let wins = a.iter().zip(&b).filter(|(x, y)| x.1 - y.1 >= tol::COMPREHENSIVE_MARGIN).count();
    let detail = a
        .iter()
        .zip(&b)
        .map(|(x, y)| format!("{} {:.1}/{:.1}", x.0, x.1, y.1))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Criterion {
        id: 11,
        name: "NoFrost* comprehensiveness",
        pass: wins >= tol::COMPREHENSIVE_WINS,
        detail: format!(
            "NoFrost*/Combine: {detail}; clean {:.1}/{:.1}; {wins} of {} columns won by >= {} (needs {})",
            reports[0].clean_acc,
            reports[1].clean_acc,
            a.len(),
            tol::COMPREHENSIVE_MARGIN,
            tol::COMPREHENSIVE_WINS
        ),
    })
}

/// 12: NoFrost clean accuracy is stable over seeds.
pub fn criterion_seed_std(zoo: &Zoo) -> Result<Criterion> {
    let t = seed_table(zoo, MethodKind::Nofrost, NormStrategy::Nf)?;
    let clean: Vec<f64> = t.iter().map(|p| p.0).collect();
    let sd = sample_std(&clean);
    Ok(Criterion {
        id: 12,
        name: "seed stability",
        pass: sd <= tol::SEED_STD_MAX,
        detail: format!("NoFrost clean {clean:.2?}: std {sd:.3} (<= {})", tol::SEED_STD_MAX),
    })
}

/// Runs every criterion in order, calling `report` as each one finishes.
/// Plots and CSVs go to `out` when given.
pub fn run_suite(zoo: &Zoo, out: Option<&Path>, report: &mut dyn FnMut(&Criterion)) -> Result<Vec<Criterion>> {
    let mut all = Vec::new();
    let mut push = |c: Criterion| {
        report(&c);
        all.push(c);
    };
    push(criterion_sws()?);
    push(criterion_attacks(tol::ATTACK_TRIALS)?);
    push(criterion_st_collapse(zoo, NormStrategy::Bn)?);
    push(criterion_probe(zoo, out)?);
    push(criterion_tradeoff(zoo, out)?);
    push(criterion_central(zoo)?);
    push(criterion_st_collapse(zoo, NormStrategy::Nf)?);
    push(criterion_eps(zoo, out)?);
    push(criterion_metrics(zoo, out)?);
    push(criterion_endpoints(zoo)?);
    push(criterion_comprehensive(zoo)?);
    push(criterion_seed_std(zoo)?);
    Ok(all)
}
