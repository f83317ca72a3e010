//! Accuracy of a NoFrost* model (trained with DeepAugment-lite and TDA)
//! under every synthetic corruption at severities 1 to 5.
//!
//!     cargo run --release -p nofrost --example corruptions

use nofrost::analysis::{evaluate, EvalConfig};
use nofrost::attacks::{eps_from_255, AttackConfig, EvalView};
use nofrost::augment::{CorruptionKind, CorruptionSpec};
use nofrost::data::{synthetic_moons_images, MoonsConfig};
use nofrost::nfcore::{ModelConfig, NormStrategy, Routing};
use nofrost::objectives::{train, MethodKind, TrainConfig};

fn main() -> nofrost::Result<()> {
    let moons = MoonsConfig::default();
    let train_set = synthetic_moons_images(&moons, 800, 1)?;
    let test = synthetic_moons_images(&moons, 200, 2)?;
    let model = ModelConfig {
        width: 4,
        num_classes: 4,
        input_shape: [3, 8, 8],
        norm: NormStrategy::Nf,
        input_norm: Some(train_set.channel_stats()),
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        method: MethodKind::NofrostStar,
        epochs: 5,
        batch_size: 64,
        attack: AttackConfig::pgd(eps_from_255(8.0), 5),
        eval_samples: 0,
        ..TrainConfig::default()
    };
    let net = train(&model, &train_set, None, &cfg)?.network;
    let ev = EvalConfig {
        corruptions: CorruptionKind::ALL
            .iter()
            .flat_map(|&k| (1..=5).map(move |s| CorruptionSpec::new(k, s)))
            .collect(),
        ..EvalConfig::clean_only()
    };
    let r = evaluate(&EvalView::new(&net, Routing::Unrouted), &test, &ev)?;
    println!("clean {:.1}%", r.clean_acc);
    for k in CorruptionKind::ALL {
        let row: Vec<String> = (1..=5).map(|s| format!("{:5.1}", r.per_corruption_acc[&format!("{}:{s}", k.name())])).collect();
        println!("{:>18}: {}", k.name(), row.join(" "));
    }
    Ok(())
}
