//! SAT-BN, SAT-IN, MBNAT and NoFrost trained on one base config and
//! tabulated from their run directories. Four epochs keep it quick but leave
//! every method short of convergence; pass 10 for the desk schedule.
//!
//!     cargo run --release -p nofrost-harness --example method_matrix [out_dir] [epochs]

use std::path::PathBuf;

use nofrost::objectives::MethodKind;
use nofrost_harness::sweep::{method_matrix, MatrixEntry};
use nofrost_harness::{ExperimentConfig, RunOptions};

fn main() -> nofrost_harness::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let mut base = ExperimentConfig::synthetic("matrix", MethodKind::Sat);
    base.output_dir = out.join("matrix-runs");
    base.data.train_size = 600;
    base.data.test_size = 200;
    base.train.epochs = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(4);
    base.train.eval_samples = 100;
    let (head, rows) = method_matrix(&base, &MatrixEntry::standard(), RunOptions::default())?;
    println!("{}", head.join(","));
    for r in rows {
        println!("{}", r.join(","));
    }
    Ok(())
}
