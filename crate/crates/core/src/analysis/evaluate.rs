use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{boundary_thickness, decision_margins, smoothness, ThicknessConfig};
use crate::attacks::{argmax_rows, eps_from_255, run_attack, AttackConfig, Classifier};
use crate::augment::{corrupt_batch, CorruptionSpec};
use crate::data::Dataset;
use crate::error::{arg_err, Result};
use crate::seeding::{self, stream};

/// A named attack of an evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: String,
    pub config: AttackConfig,
}

impl AttackSpec {
    pub fn new(name: impl Into<String>, config: AttackConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    /// 20-step PGD at `eps_255 / 255`.
    pub fn pgd20(eps_255: f64) -> Self {
        Self::new(format!("pgd20_eps{eps_255}"), AttackConfig::pgd(eps_from_255(eps_255), 20))
    }
}

/// Which samples the per-sample metrics run on, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Only labels below this value are used.
    pub max_class: usize,
    pub limit: usize,
    pub thickness: ThicknessConfig,
    /// Attack generating `x*` for the smoothness metric.
    pub smoothness_attack: AttackConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            max_class: 10,
            limit: 500,
            thickness: ThicknessConfig::default(),
            smoothness_attack: AttackConfig::pgd(eps_from_255(8.0), 20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub attacks: Vec<AttackSpec>,
    pub corruptions: Vec<CorruptionSpec>,
    pub metrics: Option<MetricConfig>,
    pub batch_size: usize,
    /// Mixed into every attack and corruption seed, together with the batch index.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attacks: vec![AttackSpec::pgd20(8.0)],
            corruptions: Vec::new(),
            metrics: None,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// Clean accuracy only.
    pub fn clean_only() -> Self {
        Self {
            attacks: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(arg_err("batch_size must be > 0"));
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.attacks {
            a.config.validate()?;
            if !names.insert(a.name.as_str()) {
                return Err(arg_err(format!("duplicate attack name `{}`", a.name)));
            }
        }
        for c in &self.corruptions {
            c.kind.parameter(c.severity)?;
        }
        if let Some(m) = &self.metrics {
            m.thickness.validate()?;
            m.smoothness_attack.validate()?;
        }
        Ok(())
    }
}

/// Means of the per-sample metrics over the metric subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_samples: usize,
    pub margin_mean: f64,
    pub thickness_mean: f64,
    pub smoothness_mean: f64,
    pub margins: Vec<f64>,
    pub thickness: Vec<f64>,
    pub smoothness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Percentages in `[0, 100]`.
    pub clean_acc: f64,
    pub per_attack_acc: BTreeMap<String, f64>,
    /// Keyed by `kind:severity`.
    pub per_corruption_acc: BTreeMap<String, f64>,
    pub clean_correct: usize,
    pub per_attack_correct: BTreeMap<String, usize>,
    pub per_corruption_correct: BTreeMap<String, usize>,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
    pub metrics: Option<MetricSummary>,
}

fn pct(correct: usize, n: usize) -> f64 {
    100.0 * correct as f64 / n as f64
}

impl EvalReport {
    /// Flat CSV header and row (metrics columns empty when not computed).
    pub fn csv_record(&self) -> (Vec<String>, Vec<String>) {
        let mut head = vec!["n_samples".to_string(), "clean_acc".to_string()];
        let mut row = vec![self.n_samples.to_string(), format!("{:.4}", self.clean_acc)];
        for (k, v) in &self.per_attack_acc {
            head.push(format!("attack:{k}"));
            row.push(format!("{v:.4}"));
        }
        for (k, v) in &self.per_corruption_acc {
            head.push(format!("corruption:{k}"));
            row.push(format!("{v:.4}"));
        }
        let m = self.metrics.as_ref();
        for (name, val) in [
            ("margin_mean", m.map(|m| m.margin_mean)),
            ("thickness_mean", m.map(|m| m.thickness_mean)),
            ("smoothness_mean", m.map(|m| m.smoothness_mean)),
        ] {
            head.push(name.to_string());
            row.push(val.map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        (head, row)
    }

    /// First attack's accuracy, the usual "robust accuracy" column.
    pub fn robust_acc(&self, name: &str) -> Option<f64> {
        self.per_attack_acc.get(name).copied()
    }
}

struct Shard {
    clean: Vec<bool>,
    attacks: Vec<usize>,
    corruptions: Vec<usize>,
}

fn count_correct(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(p, t)| p == t).count()
}

fn eval_shard<C: Classifier + ?Sized>(model: &C, data: &Dataset, cfg: &EvalConfig, batch: usize) -> Result<Shard> {
    let pred = argmax_rows(&model.logits(&data.images)?);
    let y = &data.labels;
    let mut attacks = Vec::with_capacity(cfg.attacks.len());
    for a in &cfg.attacks {
        let ac = a.config.clone().with_seed(seeding::derive(cfg.seed, &[stream::EVAL, a.config.seed, batch as u64]));
        let adv = run_attack(model, &data.images, y, &ac)?;
        attacks.push(count_correct(&argmax_rows(&model.logits(&adv.x_star)?), y));
    }
    let mut corruptions = Vec::with_capacity(cfg.corruptions.len());
    for c in &cfg.corruptions {
        let spec = CorruptionSpec {
            seed: seeding::derive(cfg.seed, &[stream::CORRUPT, c.seed, batch as u64]),
            ..c.clone()
        };
        let xc = corrupt_batch(&data.images, &spec)?;
        corruptions.push(count_correct(&argmax_rows(&model.logits(&xc)?), y));
    }
    Ok(Shard {
        clean: pred.iter().zip(y).map(|(p, t)| p == t).collect(),
        attacks,
        corruptions,
    })
}

fn batches(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(size)).map(|b| (b * size, ((b + 1) * size).min(n))).collect()
}

/// Per-sample metrics on the configured subset of `data`.
pub fn compute_metrics<C: Classifier + ?Sized>(
    model: &C,
    data: &Dataset,
    cfg: &MetricConfig,
    batch_size: usize,
    seed: u64,
) -> Result<MetricSummary> {
    let idx = data.first_classes_subset(cfg.max_class, cfg.limit);
    if idx.is_empty() {
        return Err(arg_err("metric subset is empty"));
    }
    let sub = data.select(&idx);
    let parts = batches(sub.len(), batch_size.max(1))
        .into_par_iter()
        .enumerate()
        .map(|(b, (s, e))| {
            let part = sub.slice(s, e);
            let bseed = seeding::derive(seed, &[stream::EVAL, 0x3e, b as u64]);
            let th = ThicknessConfig {
                seed: seeding::derive(bseed, &[cfg.thickness.seed]),
                ..cfg.thickness.clone()
            };
            let sm = cfg.smoothness_attack.clone().with_seed(seeding::derive(bseed, &[cfg.smoothness_attack.seed]));
            Ok((
                decision_margins(model, &part.images, &part.labels)?,
                boundary_thickness(model, &part.images, &th)?,
                smoothness(model, &part.images, &part.labels, &sm)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut margins, mut thickness, mut smooth) = (Vec::new(), Vec::new(), Vec::new());
    for (m, t, s) in parts {
        margins.extend(m);
        thickness.extend(t);
        smooth.extend(s);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricSummary {
        n_samples: margins.len(),
        margin_mean: mean(&margins),
        thickness_mean: mean(&thickness),
        smoothness_mean: mean(&smooth),
        margins,
        thickness,
        smoothness: smooth,
    })
}

/// Clean, per-attack and per-corruption accuracy plus optional metrics. The
/// dataset is sharded into batches evaluated in parallel; every batch derives
/// its seeds from `(cfg.seed, batch index)`, so the report does not depend on
/// the number of worker threads.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(arg_err("cannot evaluate on an empty dataset"));
    }
    let shards = batches(data.len(), cfg.batch_size)
        .into_par_iter()
        .enumerate()
        .map(|(b, (s, e))| eval_shard(model, &data.slice(s, e), cfg, b))
        .collect::<Result<Vec<_>>>()?;
    let n = data.len();
    let mut per_class_correct = vec![0; data.num_classes];
    let per_class_total = data.class_counts();
    let mut attack_counts = vec![0; cfg.attacks.len()];
    let mut corr_counts = vec![0; cfg.corruptions.len()];
    let mut i = 0;
    for sh in &shards {
        for &ok in &sh.clean {
            if ok {
                per_class_correct[data.labels[i]] += 1;
            }
            i += 1;
        }
        for (acc, c) in attack_counts.iter_mut().zip(&sh.attacks) {
            *acc += c;
        }
        for (acc, c) in corr_counts.iter_mut().zip(&sh.corruptions) {
            *acc += c;
        }
    }
    let clean_correct: usize = per_class_correct.iter().sum();
    let per_attack_correct: BTreeMap<String, usize> =
        cfg.attacks.iter().map(|a| a.name.clone()).zip(attack_counts).collect();
    let per_corruption_correct: BTreeMap<String, usize> =
        cfg.corruptions.iter().map(|c| c.label()).zip(corr_counts).collect();
    let metrics = match &cfg.metrics {
        Some(m) => Some(compute_metrics(model, data, m, cfg.batch_size, cfg.seed)?),
        None => None,
    };
    Ok(EvalReport {
        n_samples: n,
        clean_acc: pct(clean_correct, n),
        per_attack_acc: per_attack_correct.iter().map(|(k, &v)| (k.clone(), pct(v, n))).collect(),
        per_corruption_acc: per_corruption_correct.iter().map(|(k, &v)| (k.clone(), pct(v, n))).collect(),
        clean_correct,
        per_attack_correct,
        per_corruption_correct,
        per_class_correct,
        per_class_total,
        metrics,
    })
}
