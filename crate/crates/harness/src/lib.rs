//! Experiment plumbing for the `nofrost` toolkit: TOML configuration,
//! dataset loading, reproducible run directories with manifests, sweeps,
//! SVG plots, augmentation previews and the desk-scale reproduction suite.
//!
//! The `nofrost` binary is a thin front end over these modules.

pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod plot;
pub mod preview;
pub mod repro;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use run::{run, RunManifest, RunOptions};
