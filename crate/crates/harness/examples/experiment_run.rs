//! A reproducible run directory from a TOML config: dry run, training,
//! manifest validation and re-evaluation of the last checkpoint. The schedule
//! is kept short, so accuracies are low.
//!
//!     cargo run --release -p nofrost-harness --example experiment_run [out_dir]

use std::path::PathBuf;

use nofrost_harness::commands::evaluate;
use nofrost_harness::{run, ExperimentConfig, RunManifest, RunOptions};

const CONFIG: &str = r#"
name = "nofrost-moons"
dataset = "synthetic_moons_images"
seed = 3
output_dir = "runs"

[data]
train_size = 600
test_size = 200

[model]
width = 4
norm = "nf"

[train]
method = "nofrost"
epochs = 4
batch_size = 64
eval_samples = 100
attack = { kind = "pgd", eps = 8, steps = 5 }

[eval]
attacks = [{ kind = "pgd", eps = 8, steps = 20 }, { kind = "cw", eps = 8, steps = 20 }]
corruptions = [{ kind = "gaussian_noise", severity = 3 }]
"#;

fn main() -> nofrost_harness::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let mut cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    cfg.output_dir = out.join("runs");
    println!("config hash {}", cfg.config_hash());

    let dry = run(&cfg, RunOptions { dry_run: true, resume: false })?;
    println!("dry run: status {:?}, {} artifacts", dry.status, dry.artifacts.len());

    let m = run(&cfg, RunOptions::default())?;
    println!("trained: status {:?}, {} epochs", m.status, m.epochs_done);
    for a in &RunManifest::load(&cfg.run_dir())?.artifacts {
        println!("  {:<24} {} {}", a.kind, &a.sha256[..12], a.path);
    }
    print!("{}", std::fs::read_to_string(cfg.run_dir().join("eval.csv"))?);

    let (r, dir) = evaluate(&cfg.run_dir(), "last", &["eval.attacks=[{kind=\"mia\",eps=8,steps=20}]".into()], None)?;
    println!("last checkpoint under MIA: {:.1}% ({})", r.per_attack_acc["mia20_eps8"], dir.display());
    Ok(())
}
