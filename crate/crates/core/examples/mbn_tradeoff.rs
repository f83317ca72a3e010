//! Trains an MBNAT model (separate clean and adversarial BN statistics) and
//! sweeps the interpolation weight gamma between the two branches.
//!
//!     cargo run --release -p nofrost --example mbn_tradeoff

use nofrost::analysis::{gamma_grid, tradeoff_sweep, AttackSpec, InterpolationStrategy};
use nofrost::attacks::{eps_from_255, AttackConfig};
use nofrost::data::{synthetic_moons_images, MoonsConfig};
use nofrost::nfcore::{ModelConfig, NormStrategy};
use nofrost::objectives::{train, MethodKind, TrainConfig};

fn main() -> nofrost::Result<()> {
    let moons = MoonsConfig::default();
    let train_set = synthetic_moons_images(&moons, 1000, 1)?;
    let test = synthetic_moons_images(&moons, 200, 2)?;
    let model = ModelConfig {
        width: 4,
        num_classes: 4,
        input_shape: [3, 8, 8],
        norm: NormStrategy::Mbn,
        input_norm: Some(train_set.channel_stats()),
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        method: MethodKind::Mbnat,
        epochs: 6,
        batch_size: 64,
        attack: AttackConfig::pgd(eps_from_255(8.0), 5),
        eval_samples: 0,
        ..TrainConfig::default()
    };
    let net = train(&model, &train_set, None, &cfg)?.network;
    let attacks = [AttackSpec::new("pgd10", AttackConfig::pgd(eps_from_255(8.0), 10))];
    for strategy in [InterpolationStrategy::All, InterpolationStrategy::Logits] {
        println!("== {}", strategy.name());
        for p in tradeoff_sweep(&net, &test, &gamma_grid(6), &attacks, &strategy, 128, 0)? {
            println!("gamma {:.1}: clean {:5.1}  pgd10 {:5.1}", p.gamma, p.clean_acc, p.robust_acc["pgd10"]);
        }
    }
    Ok(())
}
