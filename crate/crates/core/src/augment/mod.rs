//! Robust augmentations (DeepAugment-lite, TDA) and the synthetic corruption suite.
//!
//! All functions take single images shaped `[C, H, W]` with pixels in `[0, 1]`
//! and are pure functions of their inputs and seeds. Labels never pass through
//! this module; batch helpers return images in the order they were given.

mod corrupt;
mod deepaugment;
mod tda;

pub use corrupt::{corrupt, corrupt_batch, CorruptionKind, CorruptionSpec};
pub use deepaugment::{DeepAugmentConfig, DeepAugmentLite};
pub use tda::{tda, TdaConfig};

use ndarray::{Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{shape_err, Result};
use crate::seeding::{self, stream};

pub(crate) fn check_image(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 || x.is_empty() {
        return Err(shape_err(format!("expected a [C, H, W] image, got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Augmentation choice of one draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugBranch {
    DeepaugmentLite,
    Tda,
}

/// Augmentation family with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AugmentKind {
    DeepaugmentLite(DeepAugmentConfig),
    Tda(TdaConfig),
    Identity,
}

impl AugmentKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentKind::DeepaugmentLite(c) => c.validate(),
            AugmentKind::Tda(c) => c.validate(),
            AugmentKind::Identity => Ok(()),
        }
    }
}

/// The NoFrost* augmenter: DeepAugment-lite or TDA with probability 1/2 each.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub deepaugment: DeepAugmentLite,
    pub tda: TdaConfig,
    /// Degenerate augmenter that returns its input (for reduction checks).
    pub identity: bool,
}

impl Augmenter {
    /// `run_seed` fixes the frozen DeepAugment-lite backbone for the whole run.
    pub fn new(channels: usize, da: DeepAugmentConfig, tda: TdaConfig, run_seed: u64) -> Result<Self> {
        da.validate()?;
        tda.validate()?;
        Ok(Self {
            deepaugment: DeepAugmentLite::new(channels, da, run_seed)?,
            tda,
            identity: false,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            deepaugment: DeepAugmentLite::new(channels, DeepAugmentConfig::identity(), 0).expect("valid"),
            tda: TdaConfig::identity(),
            identity: true,
        }
    }

    pub fn apply_branch(&self, branch: AugBranch, x: &Tensor, seed: u64) -> Result<Tensor> {
        if self.identity {
            check_image(x)?;
            return Ok(x.clone());
        }
        match branch {
            AugBranch::DeepaugmentLite => self.deepaugment.apply(x, seed),
            AugBranch::Tda => tda(x, &self.tda, seed),
        }
    }

    /// Draws a branch (fair coin) and a per-call seed from `rng`, then applies it.
    pub fn sample_augment<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<(Tensor, AugBranch)> {
        let branch = draw_branch(rng);
        let seed = rng.random::<u64>();
        Ok((self.apply_branch(branch, x, seed)?, branch))
    }

    /// Per-sample augmentation of an `[N, C, H, W]` batch.
    pub fn augment_batch(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        if x.ndim() != 4 {
            return Err(shape_err(format!("expected [N, C, H, W], got {:?}", x.shape())));
        }
        let mut rng = seeding::rng(seed, &[stream::AUGMENT]);
        let mut out = x.clone();
        for (i, mut img) in out.axis_iter_mut(Axis(0)).enumerate() {
            let src = x.index_axis(Axis(0), i).to_owned().into_dimensionality::<IxDyn>().expect("dyn");
            let (aug, _) = self.sample_augment(&src, &mut rng)?;
            img.assign(&aug);
        }
        Ok(out)
    }
}

pub fn draw_branch<R: Rng + ?Sized>(rng: &mut R) -> AugBranch {
    if rng.random_bool(0.5) {
        AugBranch::DeepaugmentLite
    } else {
        AugBranch::Tda
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn img(seed: u64) -> Tensor {
        let mut rng = seeding::rng(seed, &[77]);
        ArrayD::from_shape_fn(IxDyn(&[3, 6, 6]), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn forced_branches_match_direct_calls() {
        let aug = Augmenter::new(3, DeepAugmentConfig::default(), TdaConfig::default(), 4).unwrap();
        let x = img(1);
        assert_eq!(
            aug.apply_branch(AugBranch::DeepaugmentLite, &x, 9).unwrap(),
            aug.deepaugment.apply(&x, 9).unwrap()
        );
        assert_eq!(aug.apply_branch(AugBranch::Tda, &x, 9).unwrap(), tda(&x, &aug.tda, 9).unwrap());
    }

    #[test]
    fn branch_split_is_fair() {
        let mut rng = seeding::rng(123, &[]);
        let n = 10_000;
        let da = (0..n).filter(|_| draw_branch(&mut rng) == AugBranch::DeepaugmentLite).count();
        let f = da as f64 / n as f64;
        assert!((0.47..=0.53).contains(&f), "{f}");
    }

    #[test]
    fn batch_preserves_shape_range_and_is_deterministic() {
        let aug = Augmenter::new(3, DeepAugmentConfig::default(), TdaConfig::default(), 4).unwrap();
        let mut rng = seeding::rng(5, &[]);
        let x = ArrayD::from_shape_fn(IxDyn(&[5, 3, 7, 5]), |_| rng.random_range(0.0..1.0));
        let a = aug.augment_batch(&x, 3).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, aug.augment_batch(&x, 3).unwrap());
        let id = Augmenter::identity(3);
        assert_eq!(id.augment_batch(&x, 3).unwrap(), x);
    }
}
