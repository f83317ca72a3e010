use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::check_image;
use crate::autograd::Tensor;
use crate::error::{arg_err, Result};
use crate::seeding;

/// Texture-debiased augmentation: mild random resized crop, horizontal flip and
/// colour jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdaConfig {
    /// Crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio range (sampled log-uniformly).
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

impl Default for TdaConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            brightness: (0.6, 1.4),
            contrast: (0.6, 1.4),
            saturation: (0.6, 1.4),
        }
    }
}

impl TdaConfig {
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip_p: 1.0,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("crop_scale", self.crop_scale),
            ("crop_ratio", self.crop_ratio),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(arg_err(format!("tda {name} range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
            }
        }
        if self.crop_scale.1 > 1.0 {
            return Err(arg_err("tda crop_scale must not exceed 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(arg_err("tda flip_p must be in [0, 1]"));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Bilinear resample of the crop `[y0, y0 + ch) x [x0, x0 + cw)` to `h x w`.
fn resized_crop(x: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |d| {
        let fy = ((d[1] as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let fx = ((d[2] as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (iy1, ix1) = ((iy + 1).min(ch - 1), (ix + 1).min(cw - 1));
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let p = |yy: usize, xx: usize| x[[d[0], y0 + yy, x0 + xx]];
        let top = p(iy, ix) * (1.0 - tx) + p(iy, ix1) * tx;
        let bot = p(iy1, ix) * (1.0 - tx) + p(iy1, ix1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

fn gray(x: &Tensor, y: usize, xx: usize) -> f64 {
    let c = x.shape()[0];
    if c == 3 {
        0.299 * x[[0, y, xx]] + 0.587 * x[[1, y, xx]] + 0.114 * x[[2, y, xx]]
    } else {
        (0..c).map(|k| x[[k, y, xx]]).sum::<f64>() / c as f64
    }
}

#[derive(Clone, Copy)]
enum Jitter {
    Brightness,
    Contrast,
    Saturation,
}

/// Crop, flip, then colour jitter in a seeded order. Factors of exactly 1 and a
/// full-image crop are skipped, so the identity configuration is bitwise exact.
pub fn tda(x: &Tensor, cfg: &TdaConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let (c, h, w) = check_image(x)?;
    let mut rng = seeding::rng(seed, &[seeding::stream::AUGMENT, 0x7d]);
    let area = uniform(&mut rng, cfg.crop_scale);
    let log_r = uniform(&mut rng, (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln()));
    let ratio = log_r.exp();
    let cw = ((area * ratio).sqrt() * w as f64).round().clamp(1.0, w as f64) as usize;
    let ch = ((area / ratio).sqrt() * h as f64).round().clamp(1.0, h as f64) as usize;
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let mut out = if ch == h && cw == w {
        x.clone()
    } else {
        resized_crop(x, y0, x0, ch, cw)
    };
    if cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p) {
        let src = out.clone();
        out = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |d| src[[d[0], d[1], w - 1 - d[2]]]);
    }
    let mut order = [Jitter::Brightness, Jitter::Contrast, Jitter::Saturation];
    order.shuffle(&mut rng);
    for j in order {
        let (range, kind) = match j {
            Jitter::Brightness => (cfg.brightness, j),
            Jitter::Contrast => (cfg.contrast, j),
            Jitter::Saturation => (cfg.saturation, j),
        };
        let f = uniform(&mut rng, range);
        if f == 1.0 {
            continue;
        }
        match kind {
            Jitter::Brightness => out.mapv_inplace(|v| (v * f).clamp(0.0, 1.0)),
            Jitter::Contrast => {
                let mean = (0..h).flat_map(|y| (0..w).map(move |xx| (y, xx))).map(|(y, xx)| gray(&out, y, xx)).sum::<f64>()
                    / (h * w) as f64;
                out.mapv_inplace(|v| ((v - mean) * f + mean).clamp(0.0, 1.0));
            }
            Jitter::Saturation => {
                let src = out.clone();
                out = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |d| {
                    let gv = gray(&src, d[1], d[2]);
                    ((src[[d[0], d[1], d[2]]] - gv) * f + gv).clamp(0.0, 1.0)
                });
            }
        }
    }
    Ok(out)
}
