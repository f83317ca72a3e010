//! Normalizer-free adversarial training at desk scale.
//!
//! * [`nfcore`]: residual and dense classifiers with BN, mixture-BN, instance-norm
//!   or normalizer-free (scaled weight standardization) layers, plus checkpoints.
//! * [`attacks`]: the l-infinity PGD family (CE, CW, momentum, targeted,
//!   early-stopped, TRADES inner maximization).
//! * [`objectives`]: every training method, SGD with cosine schedule and AGC.
//! * [`augment`]: DeepAugment-lite, TDA and a synthetic corruption suite.
//! * [`analysis`]: decision margin, boundary thickness, smoothness, statistics
//!   probes and full evaluations.
//!
//! All computation is `f64` on the CPU and every random draw is seeded, so two
//! runs with the same configuration produce bitwise identical results.

pub mod analysis;
pub mod attacks;
pub mod augment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod nfcore;
pub mod objectives;
pub mod seeding;

pub use error::{Error, Result};
