//! Sweeps over the attack radius, the mixture-BN interpolation weight and
//! the training method.

use nofrost::analysis::{tradeoff_sweep, AttackSpec, EvalConfig, InterpolationStrategy, TradeoffPoint};
use nofrost::attacks::{eps_from_255, AttackConfig};
use nofrost::data::Dataset;
use nofrost::nfcore::{Network, NormStrategy};
use nofrost::objectives::MethodKind;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{config_err, Result};
use crate::run::{load_report, run, RunOptions};

/// Radii (0-255 scale) of the standard sweep.
pub const EPS_GRID: [f64; 5] = [2.0, 4.0, 8.0, 12.0, 16.0];

/// Robust accuracy of `net` under `steps`-step PGD at each radius.
pub fn eps_sweep(
    net: &Network,
    method: MethodKind,
    data: &Dataset,
    eps_255: &[f64],
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let attacks: Vec<AttackSpec> = eps_255
        .iter()
        .map(|&e| AttackSpec::new(format!("eps{e}"), AttackConfig::pgd(eps_from_255(e), steps)))
        .collect();
    let cfg = EvalConfig {
        attacks,
        batch_size,
        seed,
        ..EvalConfig::clean_only()
    };
    let report = crate::run::evaluate_model(net, method, data, &cfg)?;
    Ok(eps_255.iter().map(|&e| (e, report.per_attack_acc[&format!("eps{e}")])).collect())
}

/// Rows for the `eps_sweep` plot schema.
pub fn eps_rows(series: &str, points: &[(f64, f64)]) -> (Vec<String>, Vec<Vec<String>>) {
    let head = ["series", "eps", "robust_acc"].map(String::from).to_vec();
    let rows = points.iter().map(|(e, a)| vec![series.to_string(), e.to_string(), format!("{a:.4}")]).collect();
    (head, rows)
}

/// Interpolation sweep of a mixture-BN model with a single attack.
pub fn gamma_sweep(
    net: &Network,
    data: &Dataset,
    gammas: &[f64],
    attack: &AttackSpec,
    strategy: &InterpolationStrategy,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TradeoffPoint>> {
    Ok(tradeoff_sweep(net, data, gammas, std::slice::from_ref(attack), strategy, batch_size, seed)?)
}

/// Rows for the `interpolation` plot schema (also readable by `tradeoff`
/// after renaming `strategy` to `series`).
pub fn gamma_rows(strategy: &str, attack: &str, points: &[TradeoffPoint]) -> (Vec<String>, Vec<Vec<String>>) {
    let head = ["strategy", "gamma", "clean_acc", "robust_acc"].map(String::from).to_vec();
    let rows = points
        .iter()
        .map(|p| {
            vec![
                strategy.to_string(),
                p.gamma.to_string(),
                format!("{:.4}", p.clean_acc),
                format!("{:.4}", p.robust_acc.get(attack).copied().unwrap_or(f64::NAN)),
            ]
        })
        .collect();
    (head, rows)
}

/// One row of a method comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub label: String,
    pub method: MethodKind,
    pub norm: NormStrategy,
}

impl MatrixEntry {
    pub fn new(label: &str, method: MethodKind, norm: NormStrategy) -> Self {
        Self {
            label: label.into(),
            method,
            norm,
        }
    }

    /// SAT-BN, SAT-IN, MBNAT and NoFrost.
    pub fn standard() -> Vec<MatrixEntry> {
        vec![
            Self::new("sat-bn", MethodKind::Sat, NormStrategy::Bn),
            Self::new("sat-in", MethodKind::Sat, NormStrategy::In),
            Self::new("mbnat", MethodKind::Mbnat, NormStrategy::Mbn),
            Self::new("nofrost", MethodKind::Nofrost, NormStrategy::Nf),
        ]
    }
}

/// Configuration of one matrix cell: `base` with the method, norm and a
/// derived name.
pub fn matrix_cell(base: &ExperimentConfig, e: &MatrixEntry) -> ExperimentConfig {
    let mut c = base.clone();
    c.name = format!("{}-{}", base.name, e.label);
    c.train.method = e.method;
    c.model.norm = Some(e.norm);
    c
}

/// Runs every entry as its own experiment and assembles one comparison table
/// with a row per entry, taken from each run's `eval.json`.
pub fn method_matrix(base: &ExperimentConfig, entries: &[MatrixEntry], opts: RunOptions) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    if entries.is_empty() {
        return Err(config_err("method matrix needs at least one entry"));
    }
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for e in entries {
        let cfg = matrix_cell(base, e);
        run(&cfg, opts)?;
        let (head, row) = load_report(&cfg.run_dir())?.csv_record();
        let mut full_head = ["label", "method", "norm", "seed"].map(String::from).to_vec();
        full_head.extend(head);
        match &header {
            Some(h) if *h != full_head => {
                return Err(config_err("matrix entries produced different report columns"));
            }
            Some(_) => {}
            None => header = Some(full_head),
        }
        let mut r = vec![e.label.clone(), e.method.name().into(), e.norm.name().into(), cfg.seed.to_string()];
        r.extend(row);
        rows.push(r);
    }
    Ok((header.expect("non-empty"), rows))
}
