//! Experiment configuration files.
//!
//! One TOML file fully determines a run. Keys mirror the type fields, so a
//! value can be addressed by its dotted path (`train.lr0`, `train.attack.eps`,
//! `model.width`) both in the file and in `--set path=value` overrides.
//! Attack radii and step sizes are written on the 0-255 pixel scale and
//! converted once when the attack is built.
//!
//! ```toml
//! name = "nofrost-moons"
//! dataset = "synthetic_moons_images"
//! seed = 0
//! output_dir = "runs"
//!
//! [model]
//! depth = 8
//! width = 4
//!
//! [train]
//! method = "nofrost"
//! epochs = 10
//! attack = { eps = 8, steps = 5 }
//!
//! [[eval.attacks]]
//! eps = 8
//! steps = 20
//! ```

use std::path::{Path, PathBuf};

use nofrost::analysis::{AttackSpec, EvalConfig, MetricConfig, ThicknessConfig};
use nofrost::attacks::{eps_from_255, AttackConfig};
use nofrost::augment::{CorruptionKind, CorruptionSpec, DeepAugmentConfig, TdaConfig};
use nofrost::data::{Dataset, MoonsConfig};
use nofrost::nfcore::{Arch, ModelConfig, NormStrategy};
use nofrost::objectives::{MethodKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    SyntheticMoonsImages,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::SyntheticMoonsImages => "synthetic_moons_images",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Overrides `NOFROST_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    /// Seed of the synthetic set and of the stratified subset. Kept apart from
    /// the run seed so that seeds of one experiment share their data.
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub moons: MoonsConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            data_dir: None,
            seed: 0,
            train_size: 2000,
            test_size: 500,
            moons: MoonsConfig::default(),
        }
    }
}

/// Model fields that do not follow from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    /// Defaults to the method's own normalization.
    pub norm: Option<NormStrategy>,
    pub sws_gain: f64,
    pub sws_eps: f64,
    pub nf_alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Standardize inputs with the training set's channel statistics.
    pub input_standardize: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            arch: m.arch,
            depth: m.depth,
            width: m.width,
            norm: None,
            sws_gain: m.sws_gain,
            sws_eps: m.sws_eps,
            nf_alpha: m.nf_alpha,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
            input_standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Cw,
    Mia,
}

/// An attack on the 0-255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Column name in evaluation outputs; ignored for training attacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_kind")]
    pub kind: AttackKind,
    pub eps: f64,
    pub steps: usize,
    /// Defaults to `2.5 eps / steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default = "yes")]
    pub random_init: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_decay: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_kind() -> AttackKind {
    AttackKind::Pgd
}

fn yes() -> bool {
    true
}

impl AttackSection {
    pub fn pgd(eps: f64, steps: usize) -> Self {
        Self {
            name: None,
            kind: AttackKind::Pgd,
            eps,
            steps,
            step_size: None,
            random_init: true,
            momentum_decay: None,
            seed: 0,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let k = match self.kind {
                AttackKind::Pgd => "pgd",
                AttackKind::Cw => "cw",
                AttackKind::Mia => "mia",
            };
            format!("{k}{}_eps{}", self.steps, self.eps)
        })
    }

    pub fn to_config(&self) -> Result<AttackConfig> {
        if !(self.eps >= 0.0 && self.eps <= 255.0) {
            return Err(config_err(format!("attack eps must be in [0, 255], got {}", self.eps)));
        }
        let eps = eps_from_255(self.eps);
        let mut c = match self.kind {
            AttackKind::Pgd => AttackConfig::pgd(eps, self.steps),
            AttackKind::Cw => AttackConfig::cw(eps, self.steps),
            AttackKind::Mia => AttackConfig::mia(eps, self.steps),
        };
        if let Some(s) = self.step_size {
            c.step_size = eps_from_255(s);
        }
        if let Some(m) = self.momentum_decay {
            c.momentum_decay = m;
        }
        c.random_init = self.random_init;
        c.seed = self.seed;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: MethodKind,
    pub lambda: f64,
    pub trades_beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub agc_lambda: Option<f64>,
    pub agc_eps: f64,
    pub attack: AttackSection,
    pub fat_tau: usize,
    pub eval_attack: AttackSection,
    pub eval_samples: usize,
    pub deepaugment: DeepAugmentConfig,
    pub tda: TdaConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: t.method,
            lambda: t.lambda,
            trades_beta: t.trades_beta,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            agc_lambda: t.agc_lambda,
            agc_eps: t.agc_eps,
            attack: AttackSection::pgd(8.0, 10),
            fat_tau: t.fat_tau,
            eval_attack: AttackSection::pgd(8.0, 20),
            eval_samples: t.eval_samples,
            deepaugment: t.deepaugment,
            tda: t.tda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    pub kind: CorruptionKind,
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSection {
    pub max_class: usize,
    pub limit: usize,
    pub thickness_alpha: f64,
    pub thickness_beta: f64,
    pub thickness_eps: f64,
    pub thickness_steps: usize,
    pub quadrature_points: usize,
    pub smoothness_attack: AttackSection,
}

impl Default for MetricSection {
    fn default() -> Self {
        let m = MetricConfig::default();
        Self {
            max_class: m.max_class,
            limit: m.limit,
            thickness_alpha: m.thickness.alpha,
            thickness_beta: m.thickness.beta,
            thickness_eps: 16.0,
            thickness_steps: m.thickness.attack_steps,
            quadrature_points: m.thickness.quadrature_points,
            smoothness_attack: AttackSection::pgd(8.0, 20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub attacks: Vec<AttackSection>,
    pub corruptions: Vec<CorruptionSection>,
    pub metrics: Option<MetricSection>,
    pub batch_size: usize,
    /// Evaluate only the first `limit` test samples.
    pub limit: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            attacks: vec![AttackSection::pgd(8.0, 20)],
            corruptions: Vec::new(),
            metrics: None,
            batch_size: 128,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetKind,
    #[serde(default = "full")]
    pub subset_fraction: f64,
    /// Run seed: initialization, shuffling, attacks, augmentation, evaluation.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn full() -> f64 {
    1.0
}

/// `[A-Za-z0-9._-]`, at most 64 characters, not starting with a dot.
pub fn is_filesystem_safe(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 64
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

impl ExperimentConfig {
    /// A small synthetic experiment; the starting point of the bundled examples.
    pub fn synthetic(name: &str, method: MethodKind) -> Self {
        Self {
            name: name.into(),
            dataset: DatasetKind::SyntheticMoonsImages,
            subset_fraction: 1.0,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection {
                width: 4,
                ..ModelSection::default()
            },
            train: TrainSection {
                method,
                epochs: 10,
                batch_size: 64,
                attack: AttackSection::pgd(8.0, 5),
                eval_attack: AttackSection::pgd(8.0, 10),
                eval_samples: 200,
                ..TrainSection::default()
            },
            eval: EvalSection::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_value(toml::from_str(s).map_err(|e| config_err(e.to_string()))?)
    }

    fn from_value(v: toml::Value) -> Result<Self> {
        let cfg: Self = v.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and applies `path=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut v: toml::Value = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    /// A copy with `path=value` overrides applied, validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = toml::Value::try_from(self).map_err(|e| config_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !is_filesystem_safe(&self.name) {
            return Err(config_err(format!(
                "name `{}` must match [A-Za-z0-9._-]{{1,64}} and not start with '.'",
                self.name
            )));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(config_err(format!("subset_fraction must be in (0, 1], got {}", self.subset_fraction)));
        }
        if self.dataset == DatasetKind::SyntheticMoonsImages && (self.data.train_size == 0 || self.data.test_size == 0) {
            return Err(config_err("synthetic train_size and test_size must be positive"));
        }
        let model = self.model_config(None)?;
        model.validate()?;
        let train = self.train_config()?;
        train.validate()?;
        train.method.check_norm(model.norm)?;
        self.eval_config()?.validate()?;
        Ok(())
    }

    /// `[C, H, W]` and class count of the dataset.
    pub fn data_shape(&self) -> ([usize; 3], usize) {
        match self.dataset {
            DatasetKind::Mnist | DatasetKind::FashionMnist => ([1, 28, 28], 10),
            DatasetKind::Cifar10 => ([3, 32, 32], 10),
            DatasetKind::SyntheticMoonsImages => {
                let m = &self.data.moons;
                ([m.channels, m.size, m.size], m.num_classes)
            }
        }
    }

    /// Model configuration; input statistics come from `train` when given.
    pub fn model_config(&self, train: Option<&Dataset>) -> Result<ModelConfig> {
        let (input_shape, num_classes) = self.data_shape();
        let m = &self.model;
        Ok(ModelConfig {
            arch: m.arch,
            depth: m.depth,
            width: m.width,
            num_classes,
            input_shape,
            norm: m.norm.unwrap_or_else(|| self.train.method.default_norm()),
            sws_gain: m.sws_gain,
            sws_eps: m.sws_eps,
            nf_alpha: m.nf_alpha,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
            input_norm: if m.input_standardize { train.map(Dataset::channel_stats) } else { None },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            method: t.method,
            lambda: t.lambda,
            trades_beta: t.trades_beta,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            agc_lambda: t.agc_lambda,
            agc_eps: t.agc_eps,
            attack: t.attack.to_config()?,
            fat_tau: t.fat_tau,
            eval_attack: t.eval_attack.to_config()?,
            eval_samples: t.eval_samples,
            deepaugment: t.deepaugment.clone(),
            tda: t.tda.clone(),
            seed: self.seed,
        })
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let e = &self.eval;
        let attacks = e
            .attacks
            .iter()
            .map(|a| Ok(AttackSpec::new(a.label(), a.to_config()?)))
            .collect::<Result<Vec<_>>>()?;
        let corruptions = e
            .corruptions
            .iter()
            .map(|c| CorruptionSpec {
                seed: c.seed,
                ..CorruptionSpec::new(c.kind, c.severity)
            })
            .collect();
        let metrics = e
            .metrics
            .as_ref()
            .map(|m| -> Result<MetricConfig> {
                Ok(MetricConfig {
                    max_class: m.max_class,
                    limit: m.limit,
                    thickness: ThicknessConfig {
                        alpha: m.thickness_alpha,
                        beta: m.thickness_beta,
                        attack_steps: m.thickness_steps,
                        quadrature_points: m.quadrature_points,
                        attack_eps: eps_from_255(m.thickness_eps),
                        seed: 0,
                    },
                    smoothness_attack: m.smoothness_attack.to_config()?,
                })
            })
            .transpose()?;
        Ok(EvalConfig {
            attacks,
            corruptions,
            metrics,
            batch_size: e.batch_size,
            seed: self.seed,
        })
    }

    /// SHA-256 of the configuration with `output_dir` cleared, so a moved run
    /// keeps its identity.
    pub fn config_hash(&self) -> String {
        digest_json(&self.identity())
    }

    /// The configuration as JSON with `output_dir` cleared.
    pub fn identity(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        serde_json::to_value(&c).expect("config serializes")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// SHA-256 of the compact JSON text of `v` (object keys sorted).
pub fn digest_json(v: &serde_json::Value) -> String {
    hex(&Sha256::digest(serde_json::to_vec(v).expect("json serializes")))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies one `dotted.path=value` override. The value is parsed as a TOML
/// value when possible (`0.05`, `true`, `[1, 2]`, `"x"`) and taken as a bare
/// string otherwise (`method=nofrost`).
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not of the form path=value")))?;
    let value = parse_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("bad override path `{path}`")));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{path}`: `{k}` is not inside a table")))?;
        cur = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| config_err(format!("override `{path}` does not address a table field")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
