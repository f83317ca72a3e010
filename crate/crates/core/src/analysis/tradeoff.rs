use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, AttackSpec, EvalConfig};
use crate::attacks::EvalView;
use crate::data::Dataset;
use crate::error::{arg_err, Result};
use crate::nfcore::{MixSet, Network, NormStrategy, Routing};

/// Which layers blend BN_c and BN_a during a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InterpolationStrategy {
    /// Two full passes, logits blended.
    Logits,
    /// Every mixture-BN layer blends its statistics and affine parameters.
    All,
    /// A seeded random subset holding `fraction` of the layers.
    RandomFraction { fraction: f64, seed: u64 },
}

impl InterpolationStrategy {
    pub fn name(&self) -> String {
        match self {
            InterpolationStrategy::Logits => "logits".into(),
            InterpolationStrategy::All => "all".into(),
            InterpolationStrategy::RandomFraction { fraction, .. } => format!("random_{:.0}pct", fraction * 100.0),
        }
    }

    pub fn mix_set(&self, sites: usize) -> Result<MixSet> {
        match self {
            InterpolationStrategy::Logits => Ok(MixSet::None),
            InterpolationStrategy::All => Ok(MixSet::All),
            InterpolationStrategy::RandomFraction { fraction, seed } => MixSet::random_fraction(sites, *fraction, *seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub gamma: f64,
    pub clean_acc: f64,
    pub robust_acc: BTreeMap<String, f64>,
}

/// `{0, 1/(n-1), ..., 1}`.
pub fn gamma_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Evaluates a mixture-BN network at every `gamma`, attacking the blended
/// model itself.
pub fn tradeoff_sweep(
    net: &Network,
    data: &Dataset,
    gammas: &[f64],
    attacks: &[AttackSpec],
    strategy: &InterpolationStrategy,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TradeoffPoint>> {
    if net.norm() != NormStrategy::Mbn {
        return Err(arg_err(format!(
            "trade-off sweeps need a mixture-BN model, got {}",
            net.norm()
        )));
    }
    let mix = strategy.mix_set(net.num_norm_sites())?;
    let cfg = EvalConfig {
        attacks: attacks.to_vec(),
        corruptions: Vec::new(),
        metrics: None,
        batch_size,
        seed,
    };
    gammas
        .iter()
        .map(|&gamma| {
            let view = EvalView::new(
                net,
                Routing::Interpolate {
                    gamma,
                    mix: mix.clone(),
                },
            );
            let r = evaluate(&view, data, &cfg)?;
            Ok(TradeoffPoint {
                gamma,
                clean_acc: r.clean_acc,
                robust_acc: r.per_attack_acc,
            })
        })
        .collect()
}
