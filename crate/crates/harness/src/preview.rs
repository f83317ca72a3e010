//! PNG contact sheets of augmentations and corruptions.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Axis, IxDyn};
use nofrost::augment::{corrupt, AugBranch, Augmenter, CorruptionKind, CorruptionSpec};
use nofrost::autograd::Tensor;
use nofrost::data::Dataset;
use nofrost::seeding;

use crate::error::{config_err, Result};

/// Row labels of [`preview_rows`], top to bottom.
pub fn preview_labels(severity: u8) -> Vec<String> {
    let mut v = vec!["original".to_string(), "deepaugment_lite".into(), "tda".into()];
    v.extend(CorruptionKind::ALL.iter().map(|k| format!("{}:{severity}", k.name())));
    v
}

/// One row per transform, one column per sample: the originals, the two
/// NoFrost* augmentations and every corruption at `severity`.
pub fn preview_rows(data: &Dataset, n: usize, augmenter: &Augmenter, severity: u8, seed: u64) -> Result<Vec<Vec<Tensor>>> {
    if n == 0 || data.is_empty() {
        return Err(config_err("preview needs at least one sample"));
    }
    let originals: Vec<Tensor> = (0..n.min(data.len())).map(|i| data.image(i)).collect();
    let mut rows = vec![originals.clone()];
    for (b, branch) in [AugBranch::DeepaugmentLite, AugBranch::Tda].into_iter().enumerate() {
        rows.push(
            originals
                .iter()
                .enumerate()
                .map(|(i, x)| augmenter.apply_branch(branch, x, seeding::derive(seed, &[b as u64, i as u64])))
                .collect::<nofrost::Result<_>>()?,
        );
    }
    for kind in CorruptionKind::ALL {
        rows.push(
            originals
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let spec = CorruptionSpec {
                        seed: seeding::derive(seed, &[0xc0, i as u64]),
                        ..CorruptionSpec::new(kind, severity)
                    };
                    corrupt(x, &spec)
                })
                .collect::<nofrost::Result<_>>()?,
        );
    }
    Ok(rows)
}

/// Tiles `[C, H, W]` images (C = 1 or 3) into a grid, each pixel drawn as a
/// `scale` x `scale` block with a one-block white gutter.
pub fn grid_image(rows: &[Vec<Tensor>], scale: u32) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| config_err("empty preview grid"))?;
    let (c, h, w) = (first.shape()[0], first.shape()[1] as u32, first.shape()[2] as u32);
    if c != 1 && c != 3 {
        return Err(config_err(format!("cannot render {c}-channel images")));
    }
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (cw, ch) = ((w + 1) * scale, (h + 1) * scale);
    let mut img = RgbImage::from_pixel(ncols * cw + scale, rows.len() as u32 * ch + scale, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (k, x) in row.iter().enumerate() {
            let x = x.view().into_dimensionality::<IxDyn>().expect("dyn");
            for py in 0..h {
                for pxl in 0..w {
                    let at = |ch: usize| {
                        let v = x.index_axis(Axis(0), ch)[[py as usize, pxl as usize]];
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8
                    };
                    let rgb = if c == 1 { [at(0); 3] } else { [at(0), at(1), at(2)] };
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(
                                scale + k as u32 * cw + pxl * scale + dx,
                                scale + r as u32 * ch + py * scale + dy,
                                Rgb(rgb),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

pub fn write_preview(path: &Path, rows: &[Vec<Tensor>], scale: u32) -> Result<()> {
    grid_image(rows, scale)?.save(path)?;
    Ok(())
}
