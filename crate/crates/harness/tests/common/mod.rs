// Shared by the integration test files that declare `mod common;`.
#![allow(dead_code)]

use std::path::Path;

use nofrost::objectives::MethodKind;
use nofrost_harness::ExperimentConfig;

/// A synthetic experiment that trains in well under a second.
pub fn tiny(name: &str, method: MethodKind, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic(name, method);
    c.output_dir = out.to_path_buf();
    c.data.train_size = 96;
    c.data.test_size = 48;
    c.train.epochs = 2;
    c.train.batch_size = 32;
    c.train.attack.steps = 2;
    c.train.eval_attack.steps = 2;
    c.train.eval_samples = 24;
    c.eval.attacks[0].steps = 3;
    c
}

/// The same experiment as TOML, for the CLI.
pub fn tiny_toml(name: &str, method: MethodKind, out: &Path) -> String {
    tiny(name, method, out).to_toml_string()
}
