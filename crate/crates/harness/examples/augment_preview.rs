//! Writes a PNG sheet: original synthetic images, DeepAugment-lite, TDA and
//! each corruption at severity 3.
//!
//!     cargo run --release -p nofrost-harness --example augment_preview [out_dir]

use std::path::PathBuf;

use nofrost::objectives::MethodKind;
use nofrost_harness::commands::augment_preview;
use nofrost_harness::preview::preview_labels;
use nofrost_harness::ExperimentConfig;

fn main() -> nofrost_harness::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let mut cfg = ExperimentConfig::synthetic("preview", MethodKind::NofrostStar);
    cfg.data.train_size = 16;
    cfg.data.moons.size = 16;
    let png = augment_preview(&cfg, 8, 3, 8, &out.join("preview"))?;
    println!("rows: {}", preview_labels(3).join(", "));
    println!("{}", png.display());
    Ok(())
}
