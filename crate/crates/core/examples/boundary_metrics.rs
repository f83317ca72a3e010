//! Decision margin, boundary thickness and model smoothness of a trained
//! model, plus thickness of a hand-made 1-d profile.
//!
//!     cargo run --release -p nofrost --example boundary_metrics

use nofrost::analysis::{compute_metrics, thickness_from_profile, MetricConfig, ThicknessConfig};
use nofrost::attacks::{eps_from_255, AttackConfig, EvalView};
use nofrost::data::{synthetic_moons_images, MoonsConfig};
use nofrost::nfcore::{ModelConfig, NormStrategy, Routing};
use nofrost::objectives::{train, MethodKind, TrainConfig};

fn main() -> nofrost::Result<()> {
    // g(t) = 2t - 1 along a unit segment sits in (0, 0.75) for t in (0.5, 0.875).
    let th = thickness_from_profile(1.0, &ThicknessConfig::default(), |t| 2.0 * t - 1.0)?;
    println!("linear profile thickness {th:.4} (exact 0.375)");

    let moons = MoonsConfig::default();
    let train_set = synthetic_moons_images(&moons, 800, 1)?;
    let test = synthetic_moons_images(&moons, 200, 2)?;
    for (method, norm) in [(MethodKind::St, NormStrategy::Nf), (MethodKind::Nofrost, NormStrategy::Nf)] {
        let model = ModelConfig {
            width: 4,
            num_classes: 4,
            input_shape: [3, 8, 8],
            norm,
            input_norm: Some(train_set.channel_stats()),
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            method,
            epochs: 5,
            batch_size: 64,
            attack: AttackConfig::pgd(eps_from_255(8.0), 5),
            eval_samples: 0,
            ..TrainConfig::default()
        };
        let net = train(&model, &train_set, None, &cfg)?.network;
        let mc = MetricConfig {
            limit: 64,
            ..MetricConfig::default()
        };
        let m = compute_metrics(&EvalView::new(&net, Routing::Unrouted), &test, &mc, 64, 0)?;
        println!(
            "{method:>8}: margin {:+.4}  thickness {:.4}  smoothness {:.4}  (n = {})",
            m.margin_mean, m.thickness_mean, m.smoothness_mean, m.n_samples
        );
    }
    Ok(())
}
