//! NoFrost (normalizer-free adversarial training) against SAT with BN on the
//! synthetic benchmark, printing the per-epoch history.
//!
//!     cargo run --release -p nofrost --example train_nofrost [epochs]

use nofrost::analysis::{evaluate, AttackSpec, EvalConfig};
use nofrost::attacks::{eps_from_255, AttackConfig, EvalView};
use nofrost::data::{synthetic_moons_images, MoonsConfig};
use nofrost::nfcore::{ModelConfig, NormStrategy};
use nofrost::objectives::{train_with, MethodKind, TrainConfig};

fn main() -> nofrost::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let moons = MoonsConfig::default();
    let train_set = synthetic_moons_images(&moons, 2000, 1)?;
    let test = synthetic_moons_images(&moons, 500, 2)?;
    for (method, norm) in [(MethodKind::Nofrost, NormStrategy::Nf), (MethodKind::Sat, NormStrategy::Bn)] {
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
            epochs,
            batch_size: 64,
            attack: AttackConfig::pgd(eps_from_255(8.0), 5),
            eval_attack: AttackConfig::pgd(eps_from_255(8.0), 10),
            eval_samples: 200,
            ..TrainConfig::default()
        };
        println!("== {method} / {norm}");
        let out = train_with(&model, &train_set, Some(&test), &cfg, None, &mut |r, _| {
            let pgd = r.pgd_acc.map(|a| format!("{a:5.1}")).unwrap_or_else(|| "-".into());
            println!("epoch {:>2}  loss {:.4}  clean {:5.1}  pgd10 {pgd}", r.epoch, r.train_loss, r.clean_acc);
            Ok(())
        })?;
        let ev = EvalConfig {
            attacks: vec![AttackSpec::pgd20(8.0)],
            ..EvalConfig::clean_only()
        };
        let (routing, _) = method.eval_routings();
        let r = evaluate(&EvalView::new(&out.network, routing), &test, &ev)?;
        println!("final: clean {:.1}%  pgd20 {:.1}%", r.clean_acc, r.per_attack_acc["pgd20_eps8"]);
    }
    Ok(())
}
