//! Training methods of the comparison matrix, the SGD schedule and the
//! training loop.
//!
//! Every step has two phases. [`prepare`] generates the extra inputs a method
//! needs (adversarial and augmented batches) against a frozen eval-mode view
//! of the model. [`build_loss`] then assembles the scalar loss on a graph in
//! train mode. A method whose loss weight on the adversarial term is zero takes
//! exactly the standard-training path and never runs an attack.

mod losses;
mod optim;
mod train;

pub use losses::{
    at_loss, build_loss, cross_entropy, method_loss, nofrost_star_loss, prepare, trades_loss, BuiltLoss, LossValue,
    Prepared,
};
pub use optim::{agc_clip, cosine_lr, decays, Sgd};
pub use train::{config_hash, train, train_with, EpochRecord, TrainOutcome, HISTORY_COLUMNS};

use serde::{Deserialize, Serialize};

use crate::attacks::{eps_from_255, AttackConfig};
use crate::augment::{DeepAugmentConfig, TdaConfig};
use crate::error::{arg_err, Result};
use crate::nfcore::{NormStrategy, Routing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    St,
    Sat,
    Pgdat,
    Trades,
    Fat,
    TradesFat,
    Nofrost,
    NofrostStar,
    Combine,
    Mbnat,
}

impl MethodKind {
    pub const ALL: [MethodKind; 10] = [
        MethodKind::St,
        MethodKind::Sat,
        MethodKind::Pgdat,
        MethodKind::Trades,
        MethodKind::Fat,
        MethodKind::TradesFat,
        MethodKind::Nofrost,
        MethodKind::NofrostStar,
        MethodKind::Combine,
        MethodKind::Mbnat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::St => "st",
            MethodKind::Sat => "sat",
            MethodKind::Pgdat => "pgdat",
            MethodKind::Trades => "trades",
            MethodKind::Fat => "fat",
            MethodKind::TradesFat => "trades_fat",
            MethodKind::Nofrost => "nofrost",
            MethodKind::NofrostStar => "nofrost_star",
            MethodKind::Combine => "combine",
            MethodKind::Mbnat => "mbnat",
        }
    }

    /// Normalization used when the config does not pick one.
    pub fn default_norm(self) -> NormStrategy {
        match self {
            MethodKind::Nofrost | MethodKind::NofrostStar => NormStrategy::Nf,
            MethodKind::Mbnat => NormStrategy::Mbn,
            _ => NormStrategy::Bn,
        }
    }

    pub fn check_norm(self, norm: NormStrategy) -> Result<()> {
        let ok = match self {
            MethodKind::Nofrost | MethodKind::NofrostStar => norm == NormStrategy::Nf,
            MethodKind::Mbnat => norm == NormStrategy::Mbn,
            MethodKind::Combine => norm == NormStrategy::Bn,
            _ => norm != NormStrategy::Mbn,
        };
        if ok {
            Ok(())
        } else {
            Err(arg_err(format!("method {} cannot train a {norm} model", self.name())))
        }
    }

    /// Whether training runs an attack at all (for some loss weight).
    pub fn is_adversarial(self) -> bool {
        self != MethodKind::St
    }

    /// Routing of the clean and the adversarial evaluation.
    pub fn eval_routings(self) -> (Routing, Routing) {
        if self == MethodKind::Mbnat {
            (Routing::CLEAN, Routing::ADV)
        } else {
            (Routing::Unrouted, Routing::Unrouted)
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| arg_err(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: MethodKind,
    /// Weight of the adversarial cross-entropy term.
    pub lambda: f64,
    pub trades_beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adaptive gradient clipping threshold; `None` disables it.
    pub agc_lambda: Option<f64>,
    pub agc_eps: f64,
    /// Training-time attack.
    pub attack: AttackConfig,
    /// Extra steps after the first misclassification for the FAT methods.
    pub fat_tau: usize,
    /// Attack of the per-epoch robust-accuracy column.
    pub eval_attack: AttackConfig,
    /// Number of held-out samples evaluated after every epoch.
    pub eval_samples: usize,
    pub deepaugment: DeepAugmentConfig,
    pub tda: TdaConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Sat,
            lambda: 0.5,
            trades_beta: 1.0,
            epochs: 30,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-5,
            agc_lambda: None,
            agc_eps: 1e-3,
            attack: AttackConfig::pgd(eps_from_255(8.0), 10),
            fat_tau: 1,
            eval_attack: AttackConfig::pgd(eps_from_255(8.0), 20),
            eval_samples: 500,
            deepaugment: DeepAugmentConfig::default(),
            tda: TdaConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: MethodKind) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Loss weight of the adversarial term for the cross-entropy methods.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            MethodKind::St => 0.0,
            MethodKind::Pgdat | MethodKind::Fat => 1.0,
            _ => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(arg_err(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.trades_beta >= 0.0) {
            return Err(arg_err("trades_beta must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(arg_err("epochs and batch_size must be positive"));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(arg_err("need lr0 > 0, momentum in [0, 1) and weight_decay >= 0"));
        }
        if let Some(l) = self.agc_lambda {
            if !(l > 0.0) || !(self.agc_eps >= 0.0) {
                return Err(arg_err("agc_lambda must be > 0 and agc_eps >= 0"));
            }
        }
        self.attack.validate()?;
        self.eval_attack.validate()?;
        self.deepaugment.validate()?;
        self.tda.validate()
    }
}

#[cfg(test)]
mod tests;
