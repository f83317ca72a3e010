use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::check_image;
use crate::autograd::{Graph, Tensor};
use crate::error::{arg_err, Result};
use crate::seeding;

/// Weight-noise parameters of DeepAugment-lite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeepAugmentConfig {
    /// Std of the per-weight multiplicative factor drawn from `N(1, std^2)`.
    pub mult_std: f64,
    /// Std of the per-weight additive term drawn from `N(0, std^2)`.
    pub add_std: f64,
    /// Std of the random deviation from identity of the frozen backbone.
    pub init_noise: f64,
}

impl Default for DeepAugmentConfig {
    fn default() -> Self {
        Self {
            mult_std: 0.2,
            add_std: 0.05,
            init_noise: 0.1,
        }
    }
}

impl DeepAugmentConfig {
    /// Identity backbone, no noise.
    pub fn identity() -> Self {
        Self {
            mult_std: 0.0,
            add_std: 0.0,
            init_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mult_std", self.mult_std), ("add_std", self.add_std), ("init_noise", self.init_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(arg_err(format!("deepaugment {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A frozen image-to-image network: a stride-2 2x2 conv encoder (C -> 4C),
/// ReLU, a 1x1 mixing conv and a pixel-shuffle decoder back to C channels.
/// Starts near identity; every call perturbs the weights with seeded noise.
#[derive(Debug, Clone)]
pub struct DeepAugmentLite {
    pub cfg: DeepAugmentConfig,
    channels: usize,
    enc: Tensor,
    mix: Tensor,
}

fn normal(std: f64) -> Option<Normal<f64>> {
    (std > 0.0).then(|| Normal::new(0.0, std).expect("positive std"))
}

impl DeepAugmentLite {
    pub fn new(channels: usize, cfg: DeepAugmentConfig, run_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 {
            return Err(arg_err("deepaugment needs at least one channel"));
        }
        let c4 = 4 * channels;
        let mut enc = ArrayD::zeros(IxDyn(&[c4, channels, 2, 2]));
        for c in 0..channels {
            for dy in 0..2 {
                for dx in 0..2 {
                    enc[[c * 4 + dy * 2 + dx, c, dy, dx]] = 1.0;
                }
            }
        }
        let mut mix = ArrayD::zeros(IxDyn(&[c4, c4, 1, 1]));
        for i in 0..c4 {
            mix[[i, i, 0, 0]] = 1.0;
        }
        if let Some(d) = normal(cfg.init_noise) {
            let mut rng = seeding::rng(run_seed, &[seeding::stream::AUGMENT, 0xda]);
            enc.mapv_inplace(|v| v + d.sample(&mut rng));
            mix.mapv_inplace(|v| v + d.sample(&mut rng) / 2.0);
        }
        Ok(Self {
            cfg,
            channels,
            enc,
            mix,
        })
    }

    fn perturb(&self, w: &Tensor, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        let (m, a) = (normal(self.cfg.mult_std), normal(self.cfg.add_std));
        if m.is_none() && a.is_none() {
            return w.clone();
        }
        w.mapv(|v| {
            let f = m.map_or(1.0, |d| 1.0 + d.sample(rng));
            let e = a.map_or(0.0, |d| d.sample(rng));
            v * f + e
        })
    }

    pub fn apply(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        let (c, h, w) = check_image(x)?;
        if c != self.channels {
            return Err(arg_err(format!("deepaugment built for {} channels, got {c}", self.channels)));
        }
        let mut rng = seeding::rng(seed, &[seeding::stream::AUGMENT, 0xdb]);
        let enc = self.perturb(&self.enc, &mut rng);
        let mix = self.perturb(&self.mix, &mut rng);
        // Edge-pad odd sizes to even.
        let (hp, wp) = (h + h % 2, w + w % 2);
        let padded = ArrayD::from_shape_fn(IxDyn(&[1, c, hp, wp]), |d| x[[d[1], d[2].min(h - 1), d[3].min(w - 1)]]);
        let g = Graph::new();
        let xv = g.constant(padded);
        let e = g.conv2d(xv, g.constant(enc), 2, 0)?;
        let e = g.relu(e);
        let m = g.conv2d(e, g.constant(mix), 1, 0)?;
        let m = m.value();
        // Pixel shuffle: channel c*4 + dy*2 + dx at (i, j) -> pixel (2i + dy, 2j + dx) of channel c.
        let out = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |d| {
            let (ch, y, xx) = (d[0], d[1], d[2]);
            m[[0, ch * 4 + (y % 2) * 2 + xx % 2, y / 2, xx / 2]].clamp(0.0, 1.0)
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeding::rng(seed, &[1]);
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identity_configuration_is_exact() {
        let da = DeepAugmentLite::new(3, DeepAugmentConfig::identity(), 7).unwrap();
        for (h, w) in [(6, 6), (5, 7)] {
            let x = img(3, h, w, 2);
            assert_eq!(da.apply(&x, 11).unwrap(), x);
        }
    }

    #[test]
    fn seeds_give_diverse_outputs_in_range() {
        let da = DeepAugmentLite::new(3, DeepAugmentConfig::default(), 7).unwrap();
        let x = img(3, 8, 8, 4);
        let a = da.apply(&x, 1).unwrap();
        let b = da.apply(&x, 2).unwrap();
        let differ = a.iter().zip(b.iter()).filter(|(p, q)| p != q).count();
        assert!(differ as f64 >= 0.01 * a.len() as f64);
        assert_eq!(a, da.apply(&x, 1).unwrap());
        for s in 0..20 {
            assert!(da.apply(&x, s).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let da = DeepAugmentLite::new(3, DeepAugmentConfig::default(), 7).unwrap();
        assert!(da.apply(&img(1, 4, 4, 0), 0).is_err());
    }
}
