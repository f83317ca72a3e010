//! PGD, CW, momentum (MIA) and targeted attacks against a briefly trained
//! model, with the l-infinity budget checked on every result.
//!
//!     cargo run --release -p nofrost --example attack_suite

use nofrost::attacks::{argmax_rows, eps_from_255, run_attack, AttackConfig, EvalView};
use nofrost::data::{synthetic_moons_images, MoonsConfig};
use nofrost::nfcore::{ModelConfig, NormStrategy, Routing};
use nofrost::objectives::{train, MethodKind, TrainConfig};

fn main() -> nofrost::Result<()> {
    let moons = MoonsConfig::default();
    let train_set = synthetic_moons_images(&moons, 512, 1)?;
    let test = synthetic_moons_images(&moons, 128, 2)?;
    let model = ModelConfig {
        width: 4,
        num_classes: 4,
        input_shape: [3, 8, 8],
        norm: NormStrategy::Bn,
        input_norm: Some(train_set.channel_stats()),
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        method: MethodKind::St,
        epochs: 5,
        batch_size: 64,
        eval_samples: 0,
        ..TrainConfig::default()
    };
    let net = train(&model, &train_set, None, &cfg)?.network;
    let view = EvalView::new(&net, Routing::Unrouted);
    let eps = eps_from_255(8.0);
    for (name, atk) in [
        ("pgd", AttackConfig::pgd(eps, 20)),
        ("cw", AttackConfig::cw(eps, 20)),
        ("mia", AttackConfig::mia(eps, 20)),
        ("targeted", AttackConfig::targeted(eps, 20)),
    ] {
        let out = run_attack(&view, &test.images, &test.labels, &atk)?;
        let pred = argmax_rows(&net.predict(&out.x_star, &Routing::Unrouted)?);
        let acc = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count() as f64 / test.len() as f64;
        let dist = out
            .x_star
            .iter()
            .zip(test.images.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("{name:>8}: accuracy {:5.1}%  max |x* - x| {dist:.5} (eps {eps:.5})", 100.0 * acc);
    }
    Ok(())
}
