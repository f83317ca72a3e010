//! The l-infinity PGD attack family.
//!
//! Every attack runs `x <- project(x + step_size * sign(g))` for a configured
//! number of steps, where `g` is the input gradient of the configured loss
//! (optionally accumulated with MIA-style momentum). Attacks see the model
//! through [`Classifier`], which for a [`Network`] means an eval-mode forward
//! with frozen weights and an explicit routing.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::nfcore::{Mode, Network, Routing};
use crate::seeding::{self, stream};

/// Converts a budget on the 0-255 pixel scale to the `[0, 1]` input scale.
pub fn eps_from_255(v: f64) -> f64 {
    v / 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    TargetedCrossEntropy,
    CwMargin,
    KlVsReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    None,
    Fixed(usize),
    /// Uniform over classes other than the reference label, drawn from the attack seed.
    RandomOther,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Radius on the model's input scale (pixels in `[0, 1]`).
    pub eps: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_init: bool,
    pub loss_kind: LossKind,
    /// MIA momentum decay; 0 disables momentum.
    pub momentum_decay: f64,
    /// Early-stop budget: extra steps after the first misclassification.
    pub early_stop_extra_steps: Option<usize>,
    pub target_rule: TargetRule,
    pub seed: u64,
    pub pixel_range: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::pgd(eps_from_255(8.0), 10)
    }
}

impl AttackConfig {
    /// Untargeted CE PGD with random start and step `2.5 * eps / steps`.
    pub fn pgd(eps: f64, steps: usize) -> Self {
        Self {
            eps,
            step_size: Self::default_step(eps, steps),
            steps,
            random_init: true,
            loss_kind: LossKind::CrossEntropy,
            momentum_decay: 0.0,
            early_stop_extra_steps: None,
            target_rule: TargetRule::None,
            seed: 0,
            pixel_range: (0.0, 1.0),
        }
    }

    pub fn default_step(eps: f64, steps: usize) -> f64 {
        if steps == 0 {
            0.0
        } else {
            2.5 * eps / steps as f64
        }
    }

    pub fn cw(eps: f64, steps: usize) -> Self {
        Self {
            loss_kind: LossKind::CwMargin,
            ..Self::pgd(eps, steps)
        }
    }

    /// Momentum iterative attack with decay 1.
    pub fn mia(eps: f64, steps: usize) -> Self {
        Self {
            momentum_decay: 1.0,
            ..Self::pgd(eps, steps)
        }
    }

    pub fn targeted(eps: f64, steps: usize) -> Self {
        Self {
            loss_kind: LossKind::TargetedCrossEntropy,
            target_rule: TargetRule::RandomOther,
            ..Self::pgd(eps, steps)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(arg_err(format!("eps must be a finite value >= 0, got {}", self.eps)));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(arg_err(format!("step_size must be > 0 when steps > 0, got {}", self.step_size)));
        }
        if !(self.momentum_decay >= 0.0) {
            return Err(arg_err("momentum_decay must be >= 0"));
        }
        if self.loss_kind == LossKind::TargetedCrossEntropy && self.target_rule == TargetRule::None {
            return Err(arg_err("targeted loss needs a target rule"));
        }
        if !(self.pixel_range.0 < self.pixel_range.1) {
            return Err(arg_err("pixel range must satisfy lo < hi"));
        }
        Ok(())
    }
}

/// Result of an attack on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub x_star: Tensor,
    pub iterations_used: Vec<usize>,
    /// Untargeted: prediction differs from the label. Targeted: prediction equals the target.
    pub success: Vec<bool>,
}

/// Anything that maps an `[N, ...]` image batch to `[N, K]` logits on a graph.
pub trait Classifier: Sync {
    fn logits_graph<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        Ok((*self.logits_graph(&g, xv)?.value()).clone())
    }
}

/// A network seen as a frozen classifier: eval mode, explicit routing.
#[derive(Debug, Clone)]
pub struct EvalView<'a> {
    pub net: &'a Network,
    pub routing: Routing,
}

impl<'a> EvalView<'a> {
    pub fn new(net: &'a Network, routing: Routing) -> Self {
        Self { net, routing }
    }
}

impl Classifier for EvalView<'_> {
    fn logits_graph<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let pv = self.net.params().bind(g, false);
        Ok(self.net.forward_graph(g, &pv, x, &self.routing, Mode::Eval)?.logits)
    }
}

/// `logits = W * flatten(x) + b`, mostly for closed-form checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// `[K, D]`.
    pub w: Tensor,
    /// `[K]`.
    pub b: Tensor,
}

impl Classifier for LinearClassifier {
    fn logits_graph<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let n = shape[0];
        let d: usize = shape[1..].iter().product();
        let flat = g.reshape(x, &[n, d])?;
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        g.linear(flat, w, Some(b))
    }
}

pub fn argmax_rows(z: &Tensor) -> Vec<usize> {
    z.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn softmax_rows(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Elementwise clamp of `x_adv` into the ball of radius `eps` around `x_ref`,
/// intersected with `pixel_range`.
pub fn project_linf(x_adv: &Tensor, x_ref: &Tensor, eps: f64, pixel_range: (f64, f64)) -> Result<Tensor> {
    if x_adv.shape() != x_ref.shape() {
        return Err(shape_err(format!(
            "projection of {:?} around {:?}",
            x_adv.shape(),
            x_ref.shape()
        )));
    }
    if !(eps >= 0.0) {
        return Err(arg_err(format!("eps must be >= 0, got {eps}")));
    }
    let (lo, hi) = pixel_range;
    let mut out = x_adv.clone();
    out.zip_mut_with(x_ref, |v, &r| {
        let a = (r - eps).max(lo).min(hi);
        let b = (r + eps).max(lo).min(hi);
        *v = v.max(a).min(b);
    });
    Ok(out)
}

/// `max_{i != y} z_i - z_y` per row of `[N, K]` logits.
pub fn cw_margin_loss(logits: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    if logits.ndim() != 2 {
        return Err(shape_err(format!("logits must be [N, K], got {:?}", logits.shape())));
    }
    let g = Graph::new();
    let z = g.constant(logits.clone());
    Ok(g.cw_margin(z, y)?.value().iter().copied().collect())
}

/// Draws one target per sample according to `rule`; `reference` is the label
/// the target must differ from.
pub fn resolve_targets(rule: TargetRule, reference: &[usize], num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    match rule {
        TargetRule::None => Err(arg_err("no target rule configured")),
        TargetRule::Fixed(c) if c >= num_classes => Err(arg_err(format!(
            "target class {c} out of range for {num_classes} classes"
        ))),
        TargetRule::Fixed(c) => Ok(vec![c; reference.len()]),
        TargetRule::RandomOther => {
            if num_classes < 2 {
                return Err(arg_err("random targets need at least 2 classes"));
            }
            let mut rng = seeding::rng(seed, &[stream::ATTACK, 0x7a]);
            Ok(reference
                .iter()
                .map(|&y| {
                    let t = rng.random_range(0..num_classes - 1);
                    if t >= y {
                        t + 1
                    } else {
                        t
                    }
                })
                .collect())
        }
    }
}

/// What the attack ascends, per sample.
enum Objective<'a> {
    Untargeted(&'a [usize]),
    Cw(&'a [usize]),
    Targeted(&'a [usize]),
    Kl(&'a Tensor),
}

impl Objective<'_> {
    fn loss<'g>(&self, g: &'g Graph, z: Var<'g>) -> Result<Var<'g>> {
        Ok(match self {
            Objective::Untargeted(y) => {
                let lp = g.log_softmax(z)?;
                let picked = g.pick(lp, y)?;
                g.scale(g.sum(picked), -1.0)
            }
            Objective::Cw(y) => g.sum(g.cw_margin(z, y)?),
            Objective::Targeted(t) => {
                let lp = g.log_softmax(z)?;
                g.sum(g.pick(lp, t)?)
            }
            Objective::Kl(p_ref) => {
                // KL(p_ref || q) up to a constant in x: -sum p_ref * log q.
                let lp = g.log_softmax(z)?;
                let p = g.constant((*p_ref).clone());
                g.scale(g.sum(g.mul(lp, p)?), -1.0)
            }
        })
    }
}

/// Input gradient of the per-batch attack loss, plus the logits at `x`.
fn loss_grad<C: Classifier + ?Sized>(model: &C, x: &Tensor, obj: &Objective<'_>) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let z = model.logits_graph(&g, xv)?;
    let loss = obj.loss(&g, z)?;
    let grads = g.backward(loss)?;
    let grad = grads.get_or_zeros(xv);
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "attack gradient is not finite (loss = {})",
            loss.item()
        )));
    }
    Ok((grad, (*z.value()).clone()))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn random_start(x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    if !cfg.random_init || cfg.eps == 0.0 {
        return project_linf(x, x, cfg.eps, cfg.pixel_range);
    }
    let mut rng = seeding::rng(cfg.seed, &[stream::ATTACK]);
    let eps = cfg.eps;
    let noisy = x.mapv(|v| v + rng.random_range(-eps..=eps));
    project_linf(&noisy, x, eps, cfg.pixel_range)
}

/// Shared PGD loop. `misclassified` decides the early-stop trigger per sample.
fn run_pgd<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    obj: &Objective<'_>,
    cfg: &AttackConfig,
    early_stop: Option<(usize, &dyn Fn(usize, usize) -> bool)>,
) -> Result<(Tensor, Vec<usize>)> {
    cfg.validate()?;
    if x.ndim() < 2 || x.shape()[0] == 0 {
        return Err(shape_err(format!("attack input must be a non-empty batch, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let per = x.len() / n;
    let mut cur = random_start(x, cfg)?;
    let mut momentum = ArrayD::<f64>::zeros(x.raw_dim());
    let mut stop_at: Vec<Option<usize>> = vec![None; n];
    let mut used = vec![cfg.steps; n];
    for t in 0..cfg.steps {
        let (grad, logits) = loss_grad(model, &cur, obj)?;
        let mut active = vec![true; n];
        if let Some((extra, wrong)) = early_stop {
            let preds = argmax_rows(&logits);
            for i in 0..n {
                if stop_at[i].is_none() && wrong(i, preds[i]) {
                    stop_at[i] = Some(t + extra);
                }
                if let Some(s) = stop_at[i] {
                    if t >= s {
                        active[i] = false;
                        used[i] = s;
                    }
                }
            }
            if active.iter().all(|a| !a) {
                break;
            }
        }
        let gs = grad.as_slice().expect("standard");
        let dir: Vec<f64> = if cfg.momentum_decay > 0.0 {
            let ms = momentum.as_slice_mut().expect("standard");
            for i in 0..n {
                let row = &gs[i * per..(i + 1) * per];
                let l1: f64 = row.iter().map(|v| v.abs()).sum();
                for k in 0..per {
                    let normed = if l1 > 0.0 { row[k] / l1 } else { 0.0 };
                    ms[i * per + k] = cfg.momentum_decay * ms[i * per + k] + normed;
                }
            }
            ms.iter().map(|&v| sign(v)).collect()
        } else {
            gs.iter().map(|&v| sign(v)).collect()
        };
        let mut next = cur.clone();
        let ns = next.as_slice_mut().expect("standard");
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for k in i * per..(i + 1) * per {
                ns[k] += cfg.step_size * dir[k];
            }
        }
        cur = project_linf(&next, x, cfg.eps, cfg.pixel_range)?;
    }
    for i in 0..n {
        if let Some(s) = stop_at[i] {
            used[i] = s.min(cfg.steps);
        }
    }
    Ok((cur, used))
}

fn check_labels(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.ndim() < 2 || x.shape()[0] != y.len() {
        return Err(shape_err(format!("{} labels for a batch of shape {:?}", y.len(), x.shape())));
    }
    Ok(())
}

/// Untargeted PGD with cross-entropy or CW-margin loss (MIA momentum when
/// `momentum_decay > 0`).
pub fn pgd<C: Classifier + ?Sized>(model: &C, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AdversarialBatch> {
    check_labels(x, y)?;
    let obj = match cfg.loss_kind {
        LossKind::CrossEntropy => Objective::Untargeted(y),
        LossKind::CwMargin => Objective::Cw(y),
        other => return Err(arg_err(format!("pgd supports cross_entropy and cw_margin, got {other:?}"))),
    };
    let (x_star, used) = run_pgd(model, x, &obj, cfg, None)?;
    let preds = argmax_rows(&model.logits(&x_star)?);
    Ok(AdversarialBatch {
        success: preds.iter().zip(y).map(|(p, t)| p != t).collect(),
        x_star,
        iterations_used: used,
    })
}

/// PGD descending the cross-entropy toward `target`.
pub fn targeted_pgd<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    target: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_labels(x, target)?;
    let obj = Objective::Targeted(target);
    let (x_star, used) = run_pgd(model, x, &obj, cfg, None)?;
    let preds = argmax_rows(&model.logits(&x_star)?);
    Ok(AdversarialBatch {
        success: preds.iter().zip(target).map(|(p, t)| p == t).collect(),
        x_star,
        iterations_used: used,
    })
}

/// Early-stopped PGD: each sample stops `early_stop_extra_steps` steps after
/// it is first misclassified.
pub fn fat_early_stop_pgd<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_labels(x, y)?;
    let extra = cfg.early_stop_extra_steps.unwrap_or(1);
    let obj = match cfg.loss_kind {
        LossKind::CwMargin => Objective::Cw(y),
        _ => Objective::Untargeted(y),
    };
    let wrong = |i: usize, p: usize| p != y[i];
    let (x_star, used) = run_pgd(model, x, &obj, cfg, Some((extra, &wrong)))?;
    let preds = argmax_rows(&model.logits(&x_star)?);
    Ok(AdversarialBatch {
        success: preds.iter().zip(y).map(|(p, t)| p != t).collect(),
        x_star,
        iterations_used: used,
    })
}

/// TRADES inner maximization of `KL(p(x) || p(x'))` with `p(x)` fixed at entry.
/// Success means the prediction moved away from the clean prediction. With
/// `early_stop_extra_steps` set and labels given, samples stop early as in
/// [`fat_early_stop_pgd`].
pub fn trades_inner_max<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    trades_inner_max_with_labels(model, x, None, cfg)
}

pub fn trades_inner_max_with_labels<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    y: Option<&[usize]>,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let z0 = model.logits(x)?;
    let p_ref = softmax_rows(&z0);
    let clean_pred = argmax_rows(&z0);
    let obj = Objective::Kl(&p_ref);
    let reference: Vec<usize> = y.map(|y| y.to_vec()).unwrap_or_else(|| clean_pred.clone());
    check_labels(x, &reference)?;
    let wrong = |i: usize, p: usize| p != reference[i];
    let early = cfg.early_stop_extra_steps.map(|e| (e, &wrong as &dyn Fn(usize, usize) -> bool));
    let (x_star, used) = run_pgd(model, x, &obj, cfg, early)?;
    let preds = argmax_rows(&model.logits(&x_star)?);
    Ok(AdversarialBatch {
        success: preds.iter().zip(&clean_pred).map(|(p, c)| p != c).collect(),
        x_star,
        iterations_used: used,
    })
}

/// Dispatches on `cfg.loss_kind` (and the early-stop setting) to the matching
/// attack; targeted attacks draw targets with `cfg.target_rule` relative to `y`.
pub fn run_attack<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    match cfg.loss_kind {
        LossKind::TargetedCrossEntropy => {
            let k = model.logits(x)?.shape()[1];
            let t = resolve_targets(cfg.target_rule, y, k, cfg.seed)?;
            targeted_pgd(model, x, &t, cfg)
        }
        LossKind::KlVsReference => trades_inner_max_with_labels(model, x, Some(y), cfg),
        _ if cfg.early_stop_extra_steps.is_some() => fat_early_stop_pgd(model, x, y, cfg),
        _ => pgd(model, x, y, cfg),
    }
}

/// Per-sample KL(p || q) of two `[N, K]` probability tensors.
pub fn kl_rows(p: &Tensor, q: &Tensor) -> Vec<f64> {
    let p2 = p.view().into_dimensionality::<Ix2>().expect("[N, K]");
    let q2 = q.view().into_dimensionality::<Ix2>().expect("[N, K]");
    p2.rows()
        .into_iter()
        .zip(q2.rows())
        .map(|(a, b)| crate::analysis::metrics::model_smoothness(&a.to_vec(), &b.to_vec()))
        .collect()
}

/// Convenience: a `[N, D]` tensor from row vectors.
pub fn batch_from_rows(rows: &[Vec<f64>]) -> Tensor {
    let d = rows.first().map_or(0, |r| r.len());
    ArrayD::from_shape_vec(IxDyn(&[rows.len(), d]), rows.concat()).expect("ragged rows")
}

#[cfg(test)]
mod tests;
