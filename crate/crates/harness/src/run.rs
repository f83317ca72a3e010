//! Run directories, manifests and the train-then-evaluate pipeline.
//!
//! A run directory holds `manifest.json` plus every artifact it lists. The
//! manifest records the SHA-256 of each artifact and of the inputs that
//! produced it; [`RunManifest::load`] recomputes both. `run.lock` keeps two
//! processes out of one directory and is never an artifact.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nofrost::analysis::{evaluate, EvalConfig, EvalReport};
use nofrost::attacks::EvalView;
use nofrost::data::Dataset;
use nofrost::nfcore::{Checkpoint, Network};
use nofrost::objectives::{train_with, EpochRecord, MethodKind, HISTORY_COLUMNS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{digest_json, hex, ExperimentConfig};
use crate::datasets::{load_dataset, Splits};
use crate::error::{config_err, HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    DryRun,
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand that produced the directory.
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: RunStatus,
    pub epochs_done: usize,
    /// Everything `config_hash` is computed from.
    pub inputs: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn manifest_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Manifest(msg.into())
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, inputs: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash: digest_json(&inputs),
            seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            epochs_done: 0,
            inputs,
            artifacts: Vec::new(),
        }
    }

    /// Hashes `rel` inside `dir` and records it, replacing an older entry.
    pub fn record(&mut self, dir: &Path, kind: &str, rel: &str) -> Result<()> {
        let sha256 = file_sha(&dir.join(rel))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            kind: kind.into(),
            path: rel.into(),
            sha256,
        });
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn artifact(&self, kind: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.kind == kind)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Reads and validates a manifest: the stored hash must match the stored
    /// inputs and every listed artifact must exist with its recorded digest.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| manifest_err(format!("{}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| manifest_err(format!("{}: {e}", path.display())))?;
        m.validate(dir)?;
        Ok(m)
    }

    pub fn validate(&self, dir: &Path) -> Result<()> {
        let h = digest_json(&self.inputs);
        if h != self.config_hash {
            return Err(manifest_err(format!(
                "config hash {} does not match the recorded inputs ({h})",
                self.config_hash
            )));
        }
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            if !p.is_file() {
                return Err(manifest_err(format!("artifact {} is missing", a.path)));
            }
            if file_sha(&p)? != a.sha256 {
                return Err(manifest_err(format!("artifact {} was modified", a.path)));
            }
        }
        Ok(())
    }
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Validate and write a manifest without artifacts.
    pub dry_run: bool,
    /// Continue a partial run from its last checkpoint.
    pub resume: bool,
}

/// Writes rows with a fixed header.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let header: Vec<String> = HISTORY_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = history.iter().map(|r| r.csv_row().to_vec()).collect();
    write_csv(path, &header, &rows)
}

/// Evaluates a trained network the way its method is meant to be used: for
/// mixture-BN models clean and corrupted inputs go through the clean bank
/// and attacks through the adversarial bank.
pub fn evaluate_model(net: &Network, method: MethodKind, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let (rc, ra) = method.eval_routings();
    if rc == ra {
        return Ok(evaluate(&EvalView::new(net, rc), data, cfg)?);
    }
    let natural = EvalConfig {
        attacks: Vec::new(),
        ..cfg.clone()
    };
    let adversarial = EvalConfig {
        corruptions: Vec::new(),
        metrics: None,
        ..cfg.clone()
    };
    let mut report = evaluate(&EvalView::new(net, rc), data, &natural)?;
    let adv = evaluate(&EvalView::new(net, ra), data, &adversarial)?;
    report.per_attack_acc = adv.per_attack_acc;
    report.per_attack_correct = adv.per_attack_correct;
    Ok(report)
}

pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    let (head, row) = report.csv_record();
    write_csv(&dir.join(format!("{stem}.csv")), &head, &[row])?;
    let mut f = File::create(dir.join(format!("{stem}.json")))?;
    f.write_all((serde_json::to_string_pretty(report)? + "\n").as_bytes())?;
    Ok(())
}

fn limit(test: &Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < test.len() => test.slice(0, n),
        _ => test.clone(),
    }
}

/// Method of a checkpoint, read from its metadata.
pub fn checkpoint_method(ck: &Checkpoint) -> Result<MethodKind> {
    ck.meta
        .method
        .parse()
        .map_err(|_| manifest_err(format!("checkpoint names unknown method `{}`", ck.meta.method)))
}

/// Trains, evaluates and writes every artifact under `output_dir/name`.
///
/// Layout: `config.toml`, `history.csv`, `eval.csv`, `eval.json` and
/// `checkpoints/{last,best_clean,best_robust}.ckpt`. A manifest left in the
/// `running` state marks a partial run; it is refused unless `resume` is set,
/// in which case training continues from `checkpoints/last.ckpt`.
pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    let _lock = DirLock::acquire(&dir)?;
    let mut resume_from = None;
    if dir.join(MANIFEST_FILE).is_file() {
        let old = RunManifest::load(&dir)?;
        if old.config_hash != cfg.config_hash() {
            return Err(config_err(format!(
                "{} holds a run of a different configuration; pick another name or output_dir",
                dir.display()
            )));
        }
        if old.status == RunStatus::Running || old.status == RunStatus::Failed {
            if !opts.resume {
                return Err(manifest_err(format!(
                    "{} holds a partial run ({} epochs); pass --resume to continue it",
                    dir.display(),
                    old.epochs_done
                )));
            }
            if let Some(a) = old.artifact("checkpoint_last") {
                resume_from = Some(Checkpoint::load(dir.join(&a.path))?);
            }
        }
    }
    let mut manifest = RunManifest::new("train", cfg.identity(), cfg.seed);
    if opts.dry_run {
        manifest.status = RunStatus::DryRun;
        manifest.finished_at = Some(now());
        manifest.save(&dir)?;
        return Ok(manifest);
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    manifest.record(&dir, "config", "config.toml")?;
    manifest.save(&dir)?;

    let Splits { train, test } = load_dataset(cfg)?;
    let model = cfg.model_config(Some(&train))?;
    let tc = cfg.train_config()?;
    let ec = cfg.eval_config()?;
    let eval_set = limit(&test, cfg.eval.limit);
    std::fs::create_dir_all(dir.join("checkpoints"))?;

    let outcome = {
        let m = &mut manifest;
        let d = &dir;
        let mut on_epoch = |rec: &EpochRecord, ck: &Checkpoint| -> nofrost::Result<()> {
            let history: Vec<EpochRecord> = ck
                .meta
                .extra
                .get("history")
                .and_then(|h| serde_json::from_value(h.clone()).ok())
                .unwrap_or_else(|| vec![rec.clone()]);
            let mut step = || -> Result<()> {
                ck.save(d.join("checkpoints/last.ckpt"))?;
                m.record(d, "checkpoint_last", "checkpoints/last.ckpt")?;
                write_history(&d.join("history.csv"), &history)?;
                m.record(d, "history", "history.csv")?;
                m.epochs_done = rec.epoch;
                m.save(d)
            };
            step().map_err(|e| match e {
                HarnessError::Core(c) => c,
                HarnessError::Io(io) => nofrost::Error::Io(io),
                other => nofrost::Error::Format(other.to_string()),
            })
        };
        train_with(&model, &train, Some(&test), &tc, resume_from.as_ref(), &mut on_epoch)
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            if let nofrost::Error::Diverged { last_good: Some(ck), .. } = &e {
                ck.save(dir.join("checkpoints/last_good.ckpt"))?;
                manifest.record(&dir, "checkpoint_last_good", "checkpoints/last_good.ckpt")?;
            }
            manifest.status = RunStatus::Failed;
            manifest.finished_at = Some(now());
            manifest.save(&dir)?;
            return Err(e.into());
        }
    };
    for (ck, kind, rel) in [
        (outcome.best_clean.as_ref(), "checkpoint_best_clean", "checkpoints/best_clean.ckpt"),
        (outcome.best_robust.as_ref(), "checkpoint_best_robust", "checkpoints/best_robust.ckpt"),
    ] {
        if let Some(ck) = ck {
            ck.save(dir.join(rel))?;
            manifest.record(&dir, kind, rel)?;
        }
    }
    let report = evaluate_model(&outcome.network, tc.method, &eval_set, &ec)?;
    write_report(&dir, "eval", &report)?;
    manifest.record(&dir, "eval_csv", "eval.csv")?;
    manifest.record(&dir, "eval_json", "eval.json")?;
    manifest.status = RunStatus::Complete;
    manifest.finished_at = Some(now());
    manifest.save(&dir)?;
    Ok(manifest)
}

/// Reads the evaluation report of a finished run.
pub fn load_report(run_dir: &Path) -> Result<EvalReport> {
    let m = RunManifest::load(run_dir)?;
    let a = m
        .artifact("eval_json")
        .ok_or_else(|| manifest_err(format!("{} has no evaluation report", run_dir.display())))?;
    Ok(serde_json::from_str(&std::fs::read_to_string(run_dir.join(&a.path))?)?)
}
