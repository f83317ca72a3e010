//! Synthetic corruptions standing in for ImageNet-C style benchmarks.
//!
//! | kind              | parameter          | severity 1..5                  |
//! |-------------------|--------------------|--------------------------------|
//! | gaussian_noise    | noise std sigma    | 0.08, 0.12, 0.18, 0.26, 0.38   |
//! | motion_blur_proxy | horizontal box len | 2, 3, 4, 5, 6                  |
//! | contrast          | contrast factor c  | 0.4, 0.3, 0.2, 0.1, 0.05       |
//! | pixelate          | resolution factor  | 0.6, 0.5, 0.4, 0.3, 0.25       |

use ndarray::{ArrayD, Axis, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::check_image;
use crate::autograd::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::seeding::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    MotionBlurProxy,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::MotionBlurProxy,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::MotionBlurProxy => "motion_blur_proxy",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// The documented parameter for `severity` (1-based).
    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(arg_err(format!("severity must be in 1..=5, got {severity}")));
        }
        let i = severity as usize - 1;
        Ok(match self {
            CorruptionKind::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38][i],
            CorruptionKind::MotionBlurProxy => [2.0, 3.0, 4.0, 5.0, 6.0][i],
            CorruptionKind::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05][i],
            CorruptionKind::Pixelate => [0.6, 0.5, 0.4, 0.3, 0.25][i],
        })
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| arg_err(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Seed of stochastic kinds.
    #[serde(default)]
    pub seed: u64,
    /// Overrides the gaussian noise std of the severity table.
    #[serde(default)]
    pub noise_scale: Option<f64>,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Self {
        Self {
            kind,
            severity,
            seed: 0,
            noise_scale: None,
        }
    }

    /// `kind:severity`, the key used in reports.
    pub fn label(&self) -> String {
        format!("{}:{}", self.kind, self.severity)
    }
}

/// Applies `spec` to one `[C, H, W]` image.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let (c, h, w) = check_image(x)?;
    let p = spec.kind.parameter(spec.severity)?;
    Ok(match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = spec.noise_scale.unwrap_or(p);
            if !(sigma >= 0.0) {
                return Err(arg_err(format!("noise scale must be >= 0, got {sigma}")));
            }
            if sigma == 0.0 {
                return Ok(x.clone());
            }
            let d = Normal::new(0.0, sigma).expect("positive std");
            let mut rng = seeding::rng(spec.seed, &[stream::CORRUPT]);
            x.mapv(|v| (v + d.sample(&mut rng)).clamp(0.0, 1.0))
        }
        CorruptionKind::MotionBlurProxy => {
            let len = p as isize;
            let lo = -(len - 1) / 2;
            ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |d| {
                let s: f64 = (lo..lo + len)
                    .map(|o| x[[d[0], d[1], (d[2] as isize + o).clamp(0, w as isize - 1) as usize]])
                    .sum();
                s / len as f64
            })
        }
        CorruptionKind::Contrast => {
            let mean = x.mean().unwrap_or(0.0);
            x.mapv(|v| ((v - mean) * p + mean).clamp(0.0, 1.0))
        }
        CorruptionKind::Pixelate => {
            let sh = ((h as f64 * p).round() as usize).max(1);
            let sw = ((w as f64 * p).round() as usize).max(1);
            // Box-average into an sh x sw grid, then nearest upsample.
            let cell = |i: usize, n: usize, s: usize| (i * n / s, ((i + 1) * n / s).max(i * n / s + 1));
            let mut small = ArrayD::<f64>::zeros(IxDyn(&[c, sh, sw]));
            for ch in 0..c {
                for i in 0..sh {
                    let (y0, y1) = cell(i, h, sh);
                    for j in 0..sw {
                        let (x0, x1) = cell(j, w, sw);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc += x[[ch, y, xx]];
                            }
                        }
                        small[[ch, i, j]] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
            ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |d| small[[d[0], d[1] * sh / h, d[2] * sw / w]])
        }
    })
}

/// Corrupts every image of an `[N, C, H, W]` batch; sample `i` uses seed `(spec.seed, i)`.
pub fn corrupt_batch(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(shape_err(format!("expected [N, C, H, W], got {:?}", x.shape())));
    }
    let mut out = x.clone();
    for (i, mut img) in out.axis_iter_mut(Axis(0)).enumerate() {
        let src = x.index_axis(Axis(0), i).to_owned();
        let s = CorruptionSpec {
            seed: seeding::derive(spec.seed, &[i as u64]),
            ..spec.clone()
        };
        img.assign(&corrupt(&src, &s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img(seed: u64) -> Tensor {
        let mut rng = seeding::rng(seed, &[3]);
        ArrayD::from_shape_fn(IxDyn(&[3, 8, 8]), |_| rng.random_range(0.0..1.0))
    }

    fn std(x: &Tensor) -> f64 {
        let m = x.mean().unwrap();
        (x.mapv(|v| (v - m) * (v - m)).mean().unwrap()).sqrt()
    }

    #[test]
    fn zero_noise_override_is_identity() {
        let x = img(1);
        let s = CorruptionSpec {
            noise_scale: Some(0.0),
            ..CorruptionSpec::new(CorruptionKind::GaussianNoise, 1)
        };
        assert_eq!(corrupt(&x, &s).unwrap(), x);
    }

    #[test]
    fn contrast_reduces_spread() {
        let x = img(2);
        let y = corrupt(&x, &CorruptionSpec::new(CorruptionKind::Contrast, 5)).unwrap();
        assert!(std(&y) < std(&x));
    }

    #[test]
    fn gaussian_std_on_constant_image() {
        let x = ArrayD::from_elem(IxDyn(&[3, 64, 64]), 0.5);
        let y = corrupt(&x, &CorruptionSpec::new(CorruptionKind::GaussianNoise, 3)).unwrap();
        let s = std(&y);
        assert!((s - 0.18).abs() <= 0.05 * 0.18, "{s}");
    }

    #[test]
    fn unknown_kind_and_bad_severity() {
        assert!(matches!("fog".parse::<CorruptionKind>(), Err(crate::Error::InvalidArgument(_))));
        assert_eq!("pixelate".parse::<CorruptionKind>().unwrap(), CorruptionKind::Pixelate);
        assert!(corrupt(&img(0), &CorruptionSpec::new(CorruptionKind::Contrast, 0)).is_err());
        assert!(corrupt(&img(0), &CorruptionSpec::new(CorruptionKind::Contrast, 6)).is_err());
    }

    #[test]
    fn every_kind_preserves_shape_and_range() {
        let x = img(4);
        for k in CorruptionKind::ALL {
            for s in 1..=5 {
                let y = corrupt(&x, &CorruptionSpec::new(k, s)).unwrap();
                assert_eq!(y.shape(), x.shape());
                assert!(y.iter().all(|v| (0.0..=1.0).contains(v)), "{k} {s}");
                assert_eq!(y, corrupt(&x, &CorruptionSpec::new(k, s)).unwrap());
            }
        }
    }

    #[test]
    fn noise_distortion_grows_with_severity() {
        let mut prev = 0.0;
        for s in 1..=5 {
            let mut total = 0.0;
            for i in 0..100 {
                let x = img(100 + i);
                let spec = CorruptionSpec {
                    seed: i,
                    ..CorruptionSpec::new(CorruptionKind::GaussianNoise, s)
                };
                let y = corrupt(&x, &spec).unwrap();
                total += (&y - &x).mapv(|v| v * v).sum().sqrt();
            }
            assert!(total > prev, "severity {s}");
            prev = total;
        }
    }
}
