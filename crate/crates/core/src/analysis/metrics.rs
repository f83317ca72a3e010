//! Per-sample robustness metrics: decision margin, boundary thickness and
//! model smoothness.

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::attacks::{
    argmax_rows, eps_from_255, kl_rows, pgd, resolve_targets, softmax_rows, targeted_pgd, AttackConfig, Classifier,
    TargetRule,
};
use crate::autograd::Tensor;
use crate::error::{arg_err, shape_err, Result};

/// Floor applied to both probabilities inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-12;

/// `p_y - max_{i != y} p_i`.
pub fn decision_margin(p: &[f64], y: usize) -> Result<f64> {
    if y >= p.len() || p.len() < 2 {
        return Err(arg_err(format!("label {y} out of range for {} classes", p.len())));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(arg_err(format!("probabilities sum to {total}, expected 1")));
    }
    let other = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(p[y] - other)
}

/// `KL(p || q)` in nats with [`KL_FLOOR`] inside the logarithm.
pub fn model_smoothness(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.max(KL_FLOOR) / b.max(KL_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThicknessConfig {
    pub alpha: f64,
    pub beta: f64,
    pub attack_steps: usize,
    pub quadrature_points: usize,
    /// l-infinity radius of the targeted attack that finds `x*`.
    pub attack_eps: f64,
    pub seed: u64,
}

impl Default for ThicknessConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.75,
            attack_steps: 20,
            quadrature_points: 100,
            attack_eps: eps_from_255(16.0),
            seed: 0,
        }
    }
}

impl ThicknessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha < self.beta && self.alpha > -1.0 && self.beta < 1.0) {
            return Err(arg_err(format!(
                "thickness levels need -1 < alpha < beta < 1, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.quadrature_points < 2 {
            return Err(arg_err("quadrature_points must be >= 2"));
        }
        if !(self.attack_eps >= 0.0) {
            return Err(arg_err("attack_eps must be >= 0"));
        }
        Ok(())
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            random_init: false,
            ..AttackConfig::targeted(self.attack_eps, self.attack_steps).with_seed(self.seed)
        }
    }

    /// Midpoint nodes `t_k = (k + 1/2) / Q`.
    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        let q = self.quadrature_points as f64;
        (0..self.quadrature_points).map(move |k| (k as f64 + 0.5) / q)
    }
}

/// `length * |{t_k : alpha < g(t_k) < beta}| / Q` with midpoint nodes, where
/// `g(t)` is the level function at `t x + (1 - t) x*`.
pub fn thickness_from_profile(length: f64, cfg: &ThicknessConfig, g: impl Fn(f64) -> f64) -> Result<f64> {
    cfg.validate()?;
    if length == 0.0 {
        return Ok(0.0);
    }
    let inside = cfg.nodes().filter(|&t| {
        let v = g(t);
        cfg.alpha < v && v < cfg.beta
    });
    Ok(length * inside.count() as f64 / cfg.quadrature_points as f64)
}

fn row(x: &Tensor, i: usize) -> Tensor {
    x.index_axis(Axis(0), i).to_owned()
}

/// Boundary thickness of every sample in `x`. `x*` comes from a targeted PGD
/// toward a seeded random class `j` other than the predicted class `i`, and
/// the level function is `p_i - p_j`.
pub fn boundary_thickness<C: Classifier + ?Sized>(model: &C, x: &Tensor, cfg: &ThicknessConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let z = model.logits(x)?;
    let k = z.shape()[1];
    let pred = argmax_rows(&z);
    if cfg.attack_eps == 0.0 || cfg.attack_steps == 0 {
        return Ok(vec![0.0; pred.len()]);
    }
    let target = resolve_targets(TargetRule::RandomOther, &pred, k, cfg.seed)?;
    let adv = targeted_pgd(model, x, &target, &cfg.attack())?;
    let sample_shape = &x.shape()[1..];
    let nodes: Vec<f64> = cfg.nodes().collect();
    let mut out = Vec::with_capacity(pred.len());
    for n in 0..pred.len() {
        let (a, b) = (row(x, n), row(&adv.x_star, n));
        let length = (&a - &b).mapv(|v| v * v).sum().sqrt();
        if length == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut shape = vec![nodes.len()];
        shape.extend_from_slice(sample_shape);
        let per = a.len();
        let (av, bv) = (a.as_standard_layout(), b.as_standard_layout());
        let (av, bv) = (av.as_slice().expect("standard"), bv.as_slice().expect("standard"));
        let mut pts = Vec::with_capacity(nodes.len() * per);
        for &t in &nodes {
            pts.extend(av.iter().zip(bv).map(|(p, q)| t * p + (1.0 - t) * q));
        }
        let pts = ArrayD::from_shape_vec(IxDyn(&shape), pts).map_err(|e| shape_err(e.to_string()))?;
        let probs = softmax_rows(&model.logits(&pts)?);
        let (i, j) = (pred[n], target[n]);
        let inside = probs
            .axis_iter(Axis(0))
            .filter(|p| {
                let g = p[i] - p[j];
                cfg.alpha < g && g < cfg.beta
            })
            .count();
        out.push(length * inside as f64 / nodes.len() as f64);
    }
    Ok(out)
}

/// Decision margins of a batch against its labels.
pub fn decision_margins<C: Classifier + ?Sized>(model: &C, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let p = softmax_rows(&model.logits(x)?);
    p.axis_iter(Axis(0))
        .zip(y)
        .map(|(row, &yy)| decision_margin(&row.iter().copied().collect::<Vec<_>>(), yy))
        .collect()
}

/// `KL(p(x) || p(x*))` per sample, with `x*` from untargeted PGD under `attack`.
pub fn smoothness<C: Classifier + ?Sized>(model: &C, x: &Tensor, y: &[usize], attack: &AttackConfig) -> Result<Vec<f64>> {
    let adv = pgd(model, x, y, attack)?;
    let p = softmax_rows(&model.logits(x)?);
    let q = softmax_rows(&model.logits(&adv.x_star)?);
    Ok(kl_rows(&p, &q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::LinearClassifier;
    use approx::assert_abs_diff_eq;

    #[test]
    fn margin_examples() {
        assert_eq!(decision_margin(&[0.0, 1.0, 0.0], 1).unwrap(), 1.0);
        assert_eq!(decision_margin(&[0.25; 4], 2).unwrap(), 0.0);
        assert_abs_diff_eq!(decision_margin(&[0.5, 0.3, 0.2], 0).unwrap(), 0.2, epsilon = 1e-15);
        assert!(decision_margin(&[0.5, 0.5], 2).is_err());
        assert!(decision_margin(&[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(model_smoothness(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(model_smoothness(&[0.5, 0.5], &[0.9, 0.1]), want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, 0.5108, epsilon = 1e-4);
        assert!(model_smoothness(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn thickness_profiles() {
        let cfg = ThicknessConfig::default();
        assert_eq!(thickness_from_profile(0.0, &cfg, |_| 0.5).unwrap(), 0.0);
        assert_eq!(thickness_from_profile(2.0, &cfg, |_| 0.5).unwrap(), 2.0);
        // g runs from -1 at x* (t = 0) to 1 at x (t = 1): inside on t in (0.5, 0.875).
        let t = thickness_from_profile(1.0, &cfg, |t| 2.0 * t - 1.0).unwrap();
        assert_abs_diff_eq!(t, 0.375, epsilon = 1e-2);
        let bad = ThicknessConfig {
            quadrature_points: 1,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_budget_gives_zero_thickness() {
        let model = LinearClassifier {
            w: ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap(),
            b: ArrayD::zeros(IxDyn(&[3])),
        };
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.6, 0.2, 0.1, 0.3]).unwrap();
        let cfg = ThicknessConfig {
            attack_eps: 0.0,
            ..ThicknessConfig::default()
        };
        assert_eq!(boundary_thickness(&model, &x, &cfg).unwrap(), vec![0.0, 0.0]);
        let t = boundary_thickness(&model, &x, &ThicknessConfig::default()).unwrap();
        assert!(t.iter().all(|v| *v >= 0.0));
    }
}
