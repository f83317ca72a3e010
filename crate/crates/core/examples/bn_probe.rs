//! Compares BN running means of a clean-trained and an adversarially
//! trained model at the middle norm layer with a two-sample KS test.
//!
//!     cargo run --release -p nofrost --example bn_probe

use nofrost::analysis::{bn_stats_scatter, ks_two_sample};
use nofrost::attacks::{eps_from_255, AttackConfig};
use nofrost::data::{synthetic_moons_images, MoonsConfig};
use nofrost::nfcore::{ModelConfig, NormStrategy};
use nofrost::objectives::{train, MethodKind, TrainConfig};

fn main() -> nofrost::Result<()> {
    let train_set = synthetic_moons_images(&MoonsConfig::default(), 1000, 1)?;
    let model = ModelConfig {
        width: 8,
        num_classes: 4,
        input_shape: [3, 8, 8],
        norm: NormStrategy::Bn,
        input_norm: Some(train_set.channel_stats()),
        ..ModelConfig::default()
    };
    let layer = model.probe_layer();
    let mut scatters = Vec::new();
    for method in [MethodKind::St, MethodKind::Pgdat] {
        let cfg = TrainConfig {
            method,
            epochs: 5,
            batch_size: 64,
            attack: AttackConfig::pgd(eps_from_255(8.0), 5),
            eval_samples: 0,
            ..TrainConfig::default()
        };
        let net = train(&model, &train_set, None, &cfg)?.network;
        scatters.push(bn_stats_scatter(&net, layer, method.name(), None)?);
    }
    for s in &scatters {
        println!("{:>6} means: {:?}", s.source_label, s.means().iter().map(|m| format!("{m:+.3}")).collect::<Vec<_>>());
    }
    let ks = ks_two_sample(&scatters[0].means(), &scatters[1].means())?;
    println!("layer {layer}: KS D = {:.3}, p = {:.4} (exact: {})", ks.statistic, ks.p_value, ks.exact);
    Ok(())
}
