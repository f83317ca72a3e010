//! Small residual and dense classifiers parameterized by normalization strategy.

pub mod checkpoint;
pub mod config;
pub mod mbn;
pub mod network;
pub mod params;
pub mod sws;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{Arch, ModelConfig, NormStrategy};
pub use mbn::{mbn_forward, mbn_interpolate_logits, Branch, MbnState, Mode, RunningStats};
pub use network::{Forward, LayerStats, MixSet, Network, Routing, SiteStats, StatUpdate};
pub use params::{Param, ParamKind, ParamStore, ParamVars};
pub use sws::{fan_in, scaled_weight_standardize};
