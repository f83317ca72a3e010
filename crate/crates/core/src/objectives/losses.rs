use ndarray::concatenate;
use ndarray::Axis;

use super::{MethodKind, TrainConfig};
use crate::attacks::{fat_early_stop_pgd, pgd, trades_inner_max_with_labels, AttackConfig, EvalView};
use crate::augment::Augmenter;
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::nfcore::{Mode, Network, ParamVars, Routing, StatUpdate};

/// Inputs generated before the loss is assembled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prepared {
    pub x_adv: Option<Tensor>,
    pub x_aug: Option<Tensor>,
}

/// Which extra batches `cfg.method` needs.
fn needs(cfg: &TrainConfig) -> (bool, bool) {
    let lam = cfg.effective_lambda();
    match cfg.method {
        MethodKind::St => (false, false),
        MethodKind::Trades | MethodKind::TradesFat => (cfg.trades_beta > 0.0, false),
        MethodKind::NofrostStar | MethodKind::Combine => (true, true),
        _ => (lam > 0.0, false),
    }
}

/// Phase one: attacks (eval mode, frozen weights) and augmentation.
pub fn prepare(
    net: &Network,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &[usize],
    attack_seed: u64,
    augmenter: Option<&Augmenter>,
    augment_seed: u64,
) -> Result<Prepared> {
    let (adv, aug) = needs(cfg);
    let mut out = Prepared::default();
    if adv {
        let routing = if cfg.method == MethodKind::Mbnat {
            Routing::ADV
        } else {
            Routing::Unrouted
        };
        let view = EvalView::new(net, routing);
        let ac = cfg.attack.clone().with_seed(attack_seed);
        let batch = match cfg.method {
            MethodKind::Fat => {
                let ac = AttackConfig {
                    early_stop_extra_steps: Some(cfg.fat_tau),
                    ..ac
                };
                fat_early_stop_pgd(&view, x, y, &ac)?
            }
            MethodKind::Trades => trades_inner_max_with_labels(&view, x, None, &ac)?,
            MethodKind::TradesFat => {
                let ac = AttackConfig {
                    early_stop_extra_steps: Some(cfg.fat_tau),
                    ..ac
                };
                trades_inner_max_with_labels(&view, x, Some(y), &ac)?
            }
            _ => pgd(&view, x, y, &ac)?,
        };
        out.x_adv = Some(batch.x_star);
    }
    if aug {
        let a = augmenter.ok_or_else(|| arg_err(format!("method {} needs an augmenter", cfg.method)))?;
        out.x_aug = Some(a.augment_batch(x, augment_seed)?);
    }
    Ok(out)
}

/// Mean cross-entropy of `[N, K]` logits.
pub fn cross_entropy<'g>(g: &'g Graph, logits: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, y)?;
    Ok(g.scale(g.mean(picked), -1.0))
}

/// Mean `KL(softmax(a) || softmax(b))` over rows, differentiable in both.
fn kl_mean<'g>(g: &'g Graph, a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let la = g.log_softmax(a)?;
    let lb = g.log_softmax(b)?;
    let pa = g.exp(la);
    let diff = g.sub(la, lb)?;
    let prod = g.mul(pa, diff)?;
    let n = a.shape()[0] as f64;
    Ok(g.scale(g.sum(prod), 1.0 / n))
}

/// The assembled loss with its named terms.
pub struct BuiltLoss<'g> {
    pub loss: Var<'g>,
    pub terms: Vec<(&'static str, Var<'g>)>,
    pub updates: Vec<StatUpdate>,
}

/// Scalar values of a loss and its terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

fn required<'a>(t: &'a Option<Tensor>, what: &str) -> Result<&'a Tensor> {
    t.as_ref().ok_or_else(|| arg_err(format!("prepared batch lacks {what}")))
}

/// Logits of several same-shaped batches from one train-mode forward pass
/// (normalization statistics are shared across the concatenation).
fn joint_forward<'g>(
    g: &'g Graph,
    pv: &ParamVars<'g>,
    net: &Network,
    parts: &[&Tensor],
    routing: &Routing,
) -> Result<(Vec<Var<'g>>, Vec<StatUpdate>)> {
    let n = parts[0].shape()[0];
    if parts.iter().any(|p| p.shape() != parts[0].shape()) {
        return Err(shape_err("joint forward needs batches of equal shape"));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let x = concatenate(Axis(0), &views).map_err(|e| shape_err(e.to_string()))?;
    let fwd = net.forward_graph(g, pv, g.constant(x), routing, Mode::Train)?;
    let logits = (0..parts.len())
        .map(|i| g.slice0(fwd.logits, i * n, n))
        .collect::<Result<Vec<_>>>()?;
    Ok((logits, fwd.updates))
}

fn single<'g>(
    g: &'g Graph,
    pv: &ParamVars<'g>,
    net: &Network,
    x: &Tensor,
    routing: &Routing,
) -> Result<(Var<'g>, Vec<StatUpdate>)> {
    let fwd = net.forward_graph(g, pv, g.constant(x.clone()), routing, Mode::Train)?;
    Ok((fwd.logits, fwd.updates))
}

/// Phase two: the training loss of `cfg.method` on graph `g`.
pub fn build_loss<'g>(
    g: &'g Graph,
    pv: &ParamVars<'g>,
    net: &Network,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &[usize],
    prep: &Prepared,
) -> Result<BuiltLoss<'g>> {
    cfg.method.check_norm(net.norm())?;
    let un = Routing::Unrouted;
    let st = |g: &'g Graph, routing: &Routing| -> Result<BuiltLoss<'g>> {
        let (z, updates) = single(g, pv, net, x, routing)?;
        let ce = cross_entropy(g, z, y)?;
        Ok(BuiltLoss {
            loss: ce,
            terms: vec![("ce_clean", ce)],
            updates,
        })
    };
    match cfg.method {
        MethodKind::St => st(g, &un),
        MethodKind::Trades | MethodKind::TradesFat => {
            if cfg.trades_beta == 0.0 {
                return st(g, &un);
            }
            let xa = required(&prep.x_adv, "the adversarial batch")?;
            let (z, updates) = joint_forward(g, pv, net, &[x, xa], &un)?;
            let ce = cross_entropy(g, z[0], y)?;
            let kl = kl_mean(g, z[0], z[1])?;
            let loss = g.add(ce, g.scale(kl, cfg.trades_beta))?;
            Ok(BuiltLoss {
                loss,
                terms: vec![("ce_clean", ce), ("kl", kl)],
                updates,
            })
        }
        MethodKind::NofrostStar | MethodKind::Combine => {
            let xa = required(&prep.x_adv, "the adversarial batch")?;
            let xg = required(&prep.x_aug, "the augmented batch")?;
            let (z, updates) = joint_forward(g, pv, net, &[x, xg, xa], &un)?;
            let ce_c = cross_entropy(g, z[0], y)?;
            let ce_g = cross_entropy(g, z[1], y)?;
            let ce_a = cross_entropy(g, z[2], y)?;
            let s = g.add(g.add(ce_c, ce_g)?, ce_a)?;
            Ok(BuiltLoss {
                loss: g.scale(s, 1.0 / 3.0),
                terms: vec![("ce_clean", ce_c), ("ce_aug", ce_g), ("ce_adv", ce_a)],
                updates,
            })
        }
        MethodKind::Mbnat => {
            let lam = cfg.effective_lambda();
            if lam == 0.0 {
                return st(g, &Routing::CLEAN);
            }
            let xa = required(&prep.x_adv, "the adversarial batch")?;
            let (za, mut updates) = single(g, pv, net, xa, &Routing::ADV)?;
            let ce_a = cross_entropy(g, za, y)?;
            if lam == 1.0 {
                return Ok(BuiltLoss {
                    loss: ce_a,
                    terms: vec![("ce_adv", ce_a)],
                    updates,
                });
            }
            let (zc, uc) = single(g, pv, net, x, &Routing::CLEAN)?;
            let ce_c = cross_entropy(g, zc, y)?;
            updates.extend(uc);
            Ok(BuiltLoss {
                loss: g.add(g.scale(ce_c, 1.0 - lam), g.scale(ce_a, lam))?,
                terms: vec![("ce_clean", ce_c), ("ce_adv", ce_a)],
                updates,
            })
        }
        MethodKind::Sat | MethodKind::Pgdat | MethodKind::Fat | MethodKind::Nofrost => {
            let lam = cfg.effective_lambda();
            if lam == 0.0 {
                return st(g, &un);
            }
            let xa = required(&prep.x_adv, "the adversarial batch")?;
            if lam == 1.0 {
                let (za, updates) = single(g, pv, net, xa, &un)?;
                let ce_a = cross_entropy(g, za, y)?;
                return Ok(BuiltLoss {
                    loss: ce_a,
                    terms: vec![("ce_adv", ce_a)],
                    updates,
                });
            }
            let (z, updates) = joint_forward(g, pv, net, &[x, xa], &un)?;
            let ce_c = cross_entropy(g, z[0], y)?;
            let ce_a = cross_entropy(g, z[1], y)?;
            Ok(BuiltLoss {
                loss: g.add(g.scale(ce_c, 1.0 - lam), g.scale(ce_a, lam))?,
                terms: vec![("ce_clean", ce_c), ("ce_adv", ce_a)],
                updates,
            })
        }
    }
}

/// Prepares and evaluates the training loss of `cfg.method` once without
/// touching the network (running statistics are not committed).
pub fn method_loss(
    net: &Network,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &[usize],
    augmenter: Option<&Augmenter>,
) -> Result<LossValue> {
    let prep = prepare(net, cfg, x, y, cfg.attack.seed, augmenter, cfg.seed)?;
    loss_value(net, cfg, x, y, &prep)
}

pub(crate) fn loss_value(net: &Network, cfg: &TrainConfig, x: &Tensor, y: &[usize], prep: &Prepared) -> Result<LossValue> {
    let g = Graph::new();
    let pv = net.params().bind(&g, false);
    let b = build_loss(&g, &pv, net, cfg, x, y, prep)?;
    Ok(LossValue {
        total: b.loss.item(),
        terms: b.terms.iter().map(|(n, v)| (*n, v.item())).collect(),
    })
}

/// `(1 - lambda) CE(f(x), y) + lambda CE(f(x*), y)`; mixture-BN models route
/// the clean term through BN_c and the adversarial one through BN_a.
pub fn at_loss(net: &Network, x: &Tensor, y: &[usize], lambda: f64, attack: &AttackConfig) -> Result<LossValue> {
    let method = if net.norm() == crate::nfcore::NormStrategy::Mbn {
        MethodKind::Mbnat
    } else {
        MethodKind::Sat
    };
    let cfg = TrainConfig {
        method,
        lambda,
        attack: attack.clone(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    method_loss(net, &cfg, x, y, None)
}

/// `CE(f(x), y) + beta KL(p(x) || p(x*))` with `x*` from the TRADES inner maximization.
pub fn trades_loss(net: &Network, x: &Tensor, y: &[usize], beta: f64, attack: &AttackConfig) -> Result<LossValue> {
    let cfg = TrainConfig {
        method: MethodKind::Trades,
        trades_beta: beta,
        attack: attack.clone(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    method_loss(net, &cfg, x, y, None)
}

/// `(CE(f(x)) + CE(f(x_aug)) + CE(f(x*))) / 3` on a normalizer-free model.
pub fn nofrost_star_loss(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    augmenter: &Augmenter,
    attack: &AttackConfig,
    augment_seed: u64,
) -> Result<LossValue> {
    let cfg = TrainConfig {
        method: MethodKind::NofrostStar,
        attack: attack.clone(),
        seed: augment_seed,
        ..TrainConfig::default()
    };
    method_loss(net, &cfg, x, y, Some(augmenter))
}
