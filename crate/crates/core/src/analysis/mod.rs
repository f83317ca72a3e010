//! Robustness metrics, the running-statistics probe, evaluation reports and
//! mixture-BN trade-off sweeps.

mod evaluate;
pub mod metrics;
mod probe;
mod tradeoff;

pub use evaluate::{compute_metrics, evaluate, AttackSpec, EvalConfig, EvalReport, MetricConfig, MetricSummary};
pub use metrics::{
    boundary_thickness, decision_margin, decision_margins, model_smoothness, smoothness, thickness_from_profile,
    ThicknessConfig, KL_FLOOR,
};
pub use probe::{average_ranks, bn_stats_scatter, ks_two_sample, spearman, KsResult, StatsScatter};
pub use tradeoff::{gamma_grid, tradeoff_sweep, InterpolationStrategy, TradeoffPoint};
