//! Scaled weight standardization on a random conv kernel, and a forward
//! pass through a normalizer-free ResNet.
//!
//!     cargo run --release -p nofrost --example sws_layer

use ndarray::{ArrayD, IxDyn};
use nofrost::nfcore::{scaled_weight_standardize, ModelConfig, Network, NormStrategy, Routing};
use rand::Rng;

fn main() -> nofrost::Result<()> {
    let mut rng = nofrost::seeding::rng(7, &[]);
    let w = ArrayD::from_shape_fn(IxDyn(&[4, 3, 3, 3]), |_| rng.random_range(-2.0..3.0));
    let gain = std::f64::consts::SQRT_2;
    let s = scaled_weight_standardize(&w, gain, 1e-8)?;
    println!("target row std gain/sqrt(27) = {:.6}", gain / 27f64.sqrt());
    for (i, row) in s.outer_iter().enumerate() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!("row {i}: mean {mean:+.2e} std {std:.6}");
    }

    let cfg = ModelConfig {
        width: 4,
        num_classes: 4,
        input_shape: [3, 8, 8],
        norm: NormStrategy::Nf,
        ..ModelConfig::default()
    };
    let net = Network::new(cfg, 0)?;
    let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |_| rng.random_range(0.0..1.0));
    let logits = net.predict(&x, &Routing::Unrouted)?;
    println!("NF ResNet-8 logits {:?}:\n{logits:.4}", logits.shape());
    Ok(())
}
