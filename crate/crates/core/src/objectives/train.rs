use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::{build_loss, prepare};
use super::optim::{cosine_lr, Sgd};
use super::{MethodKind, TrainConfig};
use crate::analysis::{evaluate, AttackSpec, EvalConfig};
use crate::attacks::EvalView;
use crate::augment::Augmenter;
use crate::autograd::{Graph, Tensor};
use crate::data::Dataset;
use crate::error::{arg_err, Error, Result};
use crate::nfcore::{Checkpoint, CheckpointMeta, ModelConfig, Network};
use crate::seeding::{self, stream};

/// Column order of the training history CSV.
pub const HISTORY_COLUMNS: [&str; 6] = ["epoch", "lr", "train_loss", "clean_acc", "pgd_acc", "wall_time"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    /// Only recorded for adversarial methods.
    pub pgd_acc: Option<f64>,
    /// Seconds since the start of this invocation.
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> [String; 6] {
        [
            self.epoch.to_string(),
            format!("{:.8}", self.lr),
            format!("{:.8}", self.train_loss),
            format!("{:.4}", self.clean_acc),
            self.pgd_acc.map(|v| format!("{v:.4}")).unwrap_or_default(),
            format!("{:.3}", self.wall_time),
        ]
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochRecord>,
    /// State after the last epoch, including optimizer velocity.
    pub last: Checkpoint,
    pub best_clean: Option<Checkpoint>,
    pub best_robust: Option<Checkpoint>,
    /// Loss of every optimizer step run by this invocation.
    pub step_losses: Vec<f64>,
}

/// SHA-256 over the JSON of the model and training configurations.
pub fn config_hash(model: &ModelConfig, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("serializable"));
    h.update([0u8]);
    h.update(serde_json::to_vec(cfg).expect("serializable"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains a fresh model; see [`train_with`].
pub fn train(model: &ModelConfig, data: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, eval, cfg, None, &mut |_, _| Ok(()))
}

struct Run<'a> {
    model: &'a ModelConfig,
    cfg: &'a TrainConfig,
    hash: String,
}

impl Run<'_> {
    fn checkpoint(&self, net: &Network, opt: &Sgd, epoch: usize, history: &[EpochRecord], tag: &str) -> Checkpoint {
        let mut extra = BTreeMap::new();
        extra.insert("train_config".into(), serde_json::to_value(self.cfg).expect("serializable"));
        extra.insert("history".into(), serde_json::to_value(history).expect("serializable"));
        extra.insert("tag".into(), serde_json::Value::String(tag.into()));
        let meta = CheckpointMeta {
            method: self.cfg.method.name().into(),
            norm: self.model.norm.name().into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            epoch,
            model: self.model.clone(),
            extra,
        };
        let mut ck = Checkpoint::from_network(net, meta);
        for (p, v) in net.params().iter().zip(&opt.velocity) {
            ck.tensors.insert(format!("opt/{}", p.name), v.clone());
        }
        ck
    }
}

fn eval_record(net: &Network, eval: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<(f64, Option<f64>)> {
    let n = cfg.eval_samples.min(eval.len());
    if n == 0 {
        return Ok((0.0, None));
    }
    let sub = eval.slice(0, n);
    let (rc, ra) = cfg.method.eval_routings();
    let clean = evaluate(&EvalView::new(net, rc), &sub, &EvalConfig::clean_only())?.clean_acc;
    let robust = if cfg.method.is_adversarial() {
        let ec = EvalConfig {
            attacks: vec![AttackSpec::new("pgd", cfg.eval_attack.clone())],
            seed: seeding::derive(cfg.seed, &[stream::EVAL, epoch as u64]),
            ..EvalConfig::clean_only()
        };
        Some(evaluate(&EvalView::new(net, ra), &sub, &ec)?.per_attack_acc["pgd"])
    } else {
        None
    };
    Ok((clean, robust))
}

fn all_finite(t: &Tensor) -> bool {
    t.iter().all(|v| v.is_finite())
}

/// Trains `model` on `data` with SGD (momentum, weight decay, per-step cosine
/// schedule, optional AGC). After every epoch the first `cfg.eval_samples`
/// samples of `eval` (or of `data`) are evaluated and `on_epoch` receives the
/// record with the epoch checkpoint. `resume` continues from a checkpoint of
/// the same configuration. The run is a pure function of `(model, data, cfg)`
/// apart from the wall-time column.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`] carrying the
/// last epoch checkpoint.
pub fn train_with(
    model: &ModelConfig,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    cfg.method.check_norm(model.norm)?;
    if data.is_empty() {
        return Err(arg_err("training set is empty"));
    }
    if data.image_shape() != model.input_shape || data.num_classes != model.num_classes {
        return Err(arg_err(format!(
            "dataset ({:?}, {} classes) does not match the model ({:?}, {} classes)",
            data.image_shape(),
            data.num_classes,
            model.input_shape,
            model.num_classes
        )));
    }
    let run = Run {
        model,
        cfg,
        hash: config_hash(model, cfg),
    };
    let mut net = Network::new(model.clone(), seeding::derive(cfg.seed, &[stream::INIT]))?;
    let mut opt = Sgd::new(net.params(), cfg.momentum, cfg.weight_decay, cfg.agc_lambda.map(|l| (l, cfg.agc_eps)));
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut start_epoch = 0;
    if let Some(ck) = resume {
        if ck.meta.config_hash != run.hash {
            return Err(arg_err("resume checkpoint was written by a different configuration"));
        }
        ck.load_into(&mut net)?;
        for (i, p) in net.params().iter().enumerate() {
            let key = format!("opt/{}", p.name);
            let v = ck
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Format(format!("resume checkpoint lacks {key}")))?;
            opt.velocity[i] = v.clone();
        }
        if let Some(h) = ck.meta.extra.get("history") {
            history = serde_json::from_value(h.clone()).map_err(|e| Error::Format(e.to_string()))?;
        }
        start_epoch = ck.meta.epoch;
    }
    let augmenter = match cfg.method {
        MethodKind::NofrostStar | MethodKind::Combine => Some(Augmenter::new(
            model.input_shape[0],
            cfg.deepaugment.clone(),
            cfg.tda.clone(),
            seeding::derive(cfg.seed, &[stream::AUGMENT]),
        )?),
        _ => None,
    };
    let eval_set = eval.unwrap_or(data);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let clock = Instant::now();
    let mut last = run.checkpoint(&net, &opt, start_epoch, &history, "last");
    let mut best_clean: Option<(f64, Checkpoint)> = None;
    let mut best_robust: Option<(f64, Checkpoint)> = None;
    let mut step_losses = Vec::new();
    let mut lr = cfg.lr0;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeding::rng(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.select(chunk);
            let global = epoch * steps_per_epoch + step;
            lr = cosine_lr(global, total_steps, cfg.lr0)?;
            let attack_seed = seeding::derive(cfg.seed, &[stream::ATTACK, global as u64]);
            let augment_seed = seeding::derive(cfg.seed, &[stream::AUGMENT, global as u64]);
            let prep = prepare(&net, cfg, &batch.images, &batch.labels, attack_seed, augmenter.as_ref(), augment_seed)?;
            let g = Graph::new();
            let pv = net.params().bind(&g, true);
            let built = build_loss(&g, &pv, &net, cfg, &batch.images, &batch.labels, &prep)?;
            let loss = built.loss.item();
            let diverged = |loss: f64, last: &Checkpoint| Error::Diverged {
                epoch: epoch + 1,
                step,
                loss,
                last_good: Some(Box::new(last.clone())),
            };
            if !loss.is_finite() {
                return Err(diverged(loss, &last));
            }
            let mut grads = g.backward(built.loss)?;
            let grads: Vec<Tensor> = pv
                .iter()
                .map(|v| grads.take(*v).unwrap_or_else(|| ndarray::ArrayD::zeros(v.value().raw_dim())))
                .collect();
            if !grads.iter().all(all_finite) {
                return Err(diverged(f64::NAN, &last));
            }
            net.commit(&built.updates);
            opt.step(net.params_mut(), grads, lr)?;
            loss_sum += loss;
            step_losses.push(loss);
        }
        let (clean_acc, pgd_acc) = eval_record(&net, eval_set, cfg, epoch)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / steps_per_epoch as f64,
            clean_acc,
            pgd_acc,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        history.push(rec.clone());
        last = run.checkpoint(&net, &opt, epoch + 1, &history, "last");
        if best_clean.as_ref().is_none_or(|(b, _)| clean_acc > *b) {
            let mut ck = last.clone();
            ck.meta.extra.insert("tag".into(), "best_clean".into());
            best_clean = Some((clean_acc, ck));
        }
        if let Some(r) = pgd_acc {
            if best_robust.as_ref().is_none_or(|(b, _)| r > *b) {
                let mut ck = last.clone();
                ck.meta.extra.insert("tag".into(), "best_robust".into());
                best_robust = Some((r, ck));
            }
        }
        on_epoch(&rec, &last)?;
    }
    Ok(TrainOutcome {
        network: net,
        history,
        last,
        best_clean: best_clean.map(|b| b.1),
        best_robust: best_robust.map(|b| b.1),
        step_losses,
    })
}
