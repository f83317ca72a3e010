//! In-memory labelled image sets and a synthetic benchmark.

use ndarray::{s, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::seeding::{self, stream};

/// Images in `[N, C, H, W]` with pixels in `[0, 1]`, plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(shape_err(format!("dataset images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(arg_err(format!("label {bad} out of range for {num_classes} classes")));
        }
        let images = if images.is_standard_layout() {
            images
        } else {
            images.as_standard_layout().into_owned()
        };
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_axis(Axis(0), i).to_owned()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let images = self.images.select(Axis(0), idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            images: self.images.slice_axis(Axis(0), (start..end).into()).to_owned(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Per-channel pixel mean and standard deviation (population), with the
    /// std floored at 1e-3 so a constant channel stays usable as `input_norm`.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.images.shape()[1];
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let v = self.images.index_axis(Axis(1), ch);
            let m = v.mean().unwrap_or(0.0);
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64;
            mean.push(m);
            std.push(var.sqrt().max(1e-3));
        }
        (mean, std)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Indices of a seeded, class-stratified sample holding `fraction` of every class
    /// (rounded to the nearest integer, at least one per non-empty class).
    pub fn stratified_indices(&self, fraction: f64, seed: u64) -> Result<Vec<usize>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(arg_err(format!("subset fraction must be in (0, 1], got {fraction}")));
        }
        let mut rng = seeding::rng(seed, &[stream::DATA]);
        let mut out = Vec::new();
        for c in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let take = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
            for i in 0..take {
                let j = rng.random_range(i..members.len());
                members.swap(i, j);
            }
            out.extend_from_slice(&members[..take]);
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Indices of the first `limit` samples whose label is below `max_class`.
    pub fn first_classes_subset(&self, max_class: usize, limit: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] < max_class)
            .take(limit)
            .collect()
    }
}

/// Parameters of the synthetic "moons images" benchmark.
///
/// Each image carries two class cues. A bright blob whose position follows a
/// noisy arc (one arc per class) is large-amplitude but only partly reliable
/// since neighbouring arcs overlap. A faint class-specific stripe texture is
/// perfectly predictive but has an amplitude well below an 8/255 budget, so an
/// attacker can erase it. Standard training latches onto the texture; robust
/// training has to rely on the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoonsConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub blob_amplitude: f64,
    pub blob_radius: f64,
    /// Std of the blob centre around its arc, in pixels.
    pub position_noise: f64,
    pub texture_amplitude: f64,
    pub background: f64,
    pub pixel_noise: f64,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 3,
            size: 8,
            blob_amplitude: 0.5,
            blob_radius: 1.3,
            position_noise: 0.9,
            texture_amplitude: 0.02,
            background: 0.3,
            pixel_noise: 0.02,
        }
    }
}

/// Generates `n` samples with balanced labels.
pub fn synthetic_moons_images(cfg: &MoonsConfig, n: usize, seed: u64) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.size < 4 || cfg.channels == 0 {
        return Err(arg_err("moons benchmark needs >= 2 classes, size >= 4 and >= 1 channel"));
    }
    let mut rng = seeding::rng(seed, &[stream::DATA, n as u64]);
    let k = cfg.num_classes;
    let (c, hw) = (cfg.channels, cfg.size);
    let mut images = ArrayD::<f64>::zeros(IxDyn(&[n, c, hw, hw]));
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let centre = (hw as f64 - 1.0) / 2.0;
    let radius = hw as f64 * 0.3;
    for i in 0..n {
        let y = i % k;
        labels.push(y);
        // Class arcs tile the circle; position along the arc is uniform.
        let arc = std::f64::consts::TAU / k as f64;
        let theta = arc * (y as f64 + rng.random_range(0.1..0.9));
        let r = radius * rng.random_range(0.7..1.3);
        let cy = centre + r * theta.sin() + cfg.position_noise * noise.sample(&mut rng);
        let cx = centre + r * theta.cos() + cfg.position_noise * noise.sample(&mut rng);
        let mut img = images.slice_mut(s![i, .., .., ..]);
        for ch in 0..c {
            let tint = 1.0 - 0.25 * ch as f64 / c as f64;
            for py in 0..hw {
                for px in 0..hw {
                    let d2 = (py as f64 - cy).powi(2) + (px as f64 - cx).powi(2);
                    let blob = cfg.blob_amplitude * tint * (-d2 / (2.0 * cfg.blob_radius.powi(2))).exp();
                    let tex = cfg.texture_amplitude * texture(y, ch, py, px);
                    let v = cfg.background + blob + tex + cfg.pixel_noise * noise.sample(&mut rng);
                    img[[ch, py, px]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(images, labels, k)
}

/// +-1 pattern: class `y` gets a stripe orientation and phase of its own.
fn texture(y: usize, ch: usize, py: usize, px: usize) -> f64 {
    let t = match y % 4 {
        0 => px,
        1 => py,
        2 => px + py,
        _ => px + 2 * py + 1,
    } + y / 4
        + ch;
    if t % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_is_deterministic_and_balanced() {
        let cfg = MoonsConfig::default();
        let a = synthetic_moons_images(&cfg, 40, 3).unwrap();
        let b = synthetic_moons_images(&cfg, 40, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10; 4]);
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn stratified_subset_respects_fraction() {
        let d = synthetic_moons_images(&MoonsConfig::default(), 400, 1).unwrap();
        let idx = d.stratified_indices(0.1, 5).unwrap();
        let sub = d.select(&idx);
        for c in sub.class_counts() {
            assert!((9..=11).contains(&c));
        }
        assert_eq!(idx, d.stratified_indices(0.1, 5).unwrap());
        assert!(d.stratified_indices(0.0, 5).is_err());
    }
}
