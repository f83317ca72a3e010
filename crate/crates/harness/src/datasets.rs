//! Dataset ingestion.
//!
//! Nothing is downloaded. Files are looked up under `data.data_dir`, else
//! `$NOFROST_DATA_DIR`, else `./data`:
//!
//! ```text
//! <dir>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! <dir>/fashion_mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! <dir>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
//! ```
//!
//! Every file is checked structurally (magic numbers, counts, sizes). If the
//! dataset directory holds a `SHA256SUMS` file (`sha256sum` format), the
//! listed files are verified against it as well. Pixels are scaled to `[0, 1]`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{ArrayD, IxDyn};
use nofrost::data::{synthetic_moons_images, Dataset};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{hex, DatasetKind, ExperimentConfig};
use crate::error::{HarnessError, Result};

pub const DATA_DIR_ENV: &str = "NOFROST_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn data_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Data(msg.into())
}

pub fn data_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads (or generates) both splits and applies the stratified subset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Splits> {
    let full = match cfg.dataset {
        DatasetKind::SyntheticMoonsImages => Splits {
            train: synthetic_moons_images(&cfg.data.moons, cfg.data.train_size, cfg.data.seed)?,
            test: synthetic_moons_images(&cfg.data.moons, cfg.data.test_size, cfg.data.seed.wrapping_add(1))?,
        },
        DatasetKind::Mnist | DatasetKind::FashionMnist => load_idx(&data_root(cfg).join(cfg.dataset.name()))?,
        DatasetKind::Cifar10 => load_cifar(&data_root(cfg).join("cifar-10-batches-bin"))?,
    };
    subset(full, cfg.subset_fraction, cfg.data.seed)
}

/// Stratified subset of both splits; `fraction = 1` returns them untouched.
pub fn subset(s: Splits, fraction: f64, seed: u64) -> Result<Splits> {
    if fraction >= 1.0 {
        return Ok(s);
    }
    let tr = s.train.stratified_indices(fraction, seed)?;
    let te = s.test.stratified_indices(fraction, seed.wrapping_add(1))?;
    Ok(Splits {
        train: s.train.select(&tr),
        test: s.test.select(&te),
    })
}

fn missing(dir: &Path, file: &str, what: &str) -> HarnessError {
    data_err(format!(
        "{what} file {} not found. Automatic download is not supported: fetch the official archive, \
         unpack it so that {file} sits in {}, or point {DATA_DIR_ENV} (or data.data_dir) at the parent directory",
        dir.join(file).display(),
        dir.display()
    ))
}

/// Reads `name` or `name.gz` and verifies it against `SHA256SUMS` when listed.
fn read_maybe_gz(dir: &Path, name: &str, sums: &BTreeMap<String, String>, what: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    let gz_name = format!("{name}.gz");
    let gz = dir.join(&gz_name);
    let (file, raw) = if plain.is_file() {
        (name.to_string(), std::fs::read(&plain)?)
    } else if gz.is_file() {
        (gz_name, std::fs::read(&gz)?)
    } else {
        return Err(missing(dir, name, what));
    };
    verify(&file, &raw, sums)?;
    if file.ends_with(".gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| data_err(format!("{}: corrupt gzip stream: {e}", dir.join(&file).display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_sums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("SHA256SUMS");
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path)?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        match (it.next(), it.next()) {
            (Some(h), Some(f)) => {
                out.insert(f.trim_start_matches('*').to_string(), h.to_ascii_lowercase());
            }
            _ => return Err(data_err(format!("{}: malformed line `{line}`", path.display()))),
        }
    }
    Ok(out)
}

fn verify(file: &str, bytes: &[u8], sums: &BTreeMap<String, String>) -> Result<()> {
    if let Some(want) = sums.get(file) {
        let got = hex(&Sha256::digest(bytes));
        if &got != want {
            return Err(data_err(format!("{file}: sha256 {got} does not match SHA256SUMS ({want})")));
        }
    }
    Ok(())
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an IDX image file (magic 2051) into `[N, 1, H, W]` in `[0, 1]`.
pub fn parse_idx_images(b: &[u8]) -> Result<ArrayD<f64>> {
    if b.len() < 16 || be_u32(b, 0) != 2051 {
        return Err(data_err("not an IDX image file (magic 2051)"));
    }
    let (n, h, w) = (be_u32(b, 4) as usize, be_u32(b, 8) as usize, be_u32(b, 12) as usize);
    if b.len() != 16 + n * h * w {
        return Err(data_err(format!("IDX image file truncated: {n}x{h}x{w} needs {} bytes", 16 + n * h * w)));
    }
    let px = b[16..].iter().map(|&v| v as f64 / 255.0).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[n, 1, h, w]), px).expect("size checked"))
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(b: &[u8]) -> Result<Vec<usize>> {
    if b.len() < 8 || be_u32(b, 0) != 2049 {
        return Err(data_err("not an IDX label file (magic 2049)"));
    }
    let n = be_u32(b, 4) as usize;
    if b.len() != 8 + n {
        return Err(data_err(format!("IDX label file truncated: {n} labels need {} bytes", 8 + n)));
    }
    Ok(b[8..].iter().map(|&v| v as usize).collect())
}

fn load_idx(dir: &Path) -> Result<Splits> {
    let sums = read_sums(dir)?;
    let split = |prefix: &str, expect: usize| -> Result<Dataset> {
        let images = parse_idx_images(&read_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"), &sums, "IDX image")?)?;
        let labels = parse_idx_labels(&read_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"), &sums, "IDX label")?)?;
        if images.shape()[0] != expect || labels.len() != expect || images.shape()[2..] != [28, 28] {
            return Err(data_err(format!(
                "{}: expected {expect} 28x28 samples, found {} images and {} labels",
                dir.display(),
                images.shape()[0],
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l >= 10) {
            return Err(data_err(format!("{}: label outside 0..10", dir.display())));
        }
        Ok(Dataset::new(images, labels, 10)?)
    };
    Ok(Splits {
        train: split("train", 60_000)?,
        test: split("t10k", 10_000)?,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch (label byte then 3072 CHW pixel bytes).
pub fn parse_cifar_batch(b: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if b.is_empty() || b.len() % CIFAR_RECORD != 0 {
        return Err(data_err(format!("CIFAR batch of {} bytes is not a multiple of {CIFAR_RECORD}", b.len())));
    }
    let n = b.len() / CIFAR_RECORD;
    let mut px = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in b.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(data_err(format!("CIFAR label {} outside 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        px.extend(rec[1..].iter().map(|&v| v as f64 / 255.0));
    }
    Ok((px, labels))
}

fn load_cifar(dir: &Path) -> Result<Splits> {
    let sums = read_sums(dir)?;
    let read = |name: &str| -> Result<(Vec<f64>, Vec<usize>)> {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(missing(dir, name, "CIFAR-10 batch"));
        }
        let bytes = std::fs::read(&path)?;
        verify(name, &bytes, &sums)?;
        if bytes.len() != 10_000 * CIFAR_RECORD {
            return Err(data_err(format!("{}: expected {} bytes, found {}", path.display(), 10_000 * CIFAR_RECORD, bytes.len())));
        }
        parse_cifar_batch(&bytes)
    };
    let names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).chain(["test_batch.bin".into()]).collect();
    let mut parts = names.par_iter().map(|n| read(n)).collect::<Result<Vec<_>>>()?;
    let (tpx, tl) = parts.pop().expect("six batches");
    let (mut px, mut labels) = (Vec::new(), Vec::new());
    for (p, l) in parts {
        px.extend(p);
        labels.extend(l);
    }
    let build = |px: Vec<f64>, labels: Vec<usize>| -> Result<Dataset> {
        let n = labels.len();
        let images = ArrayD::from_shape_vec(IxDyn(&[n, 3, 32, 32]), px).expect("size checked");
        Ok(Dataset::new(images, labels, 10)?)
    };
    Ok(Splits {
        train: build(px, labels)?,
        test: build(tpx, tl)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [2051u32, n, 28, 28] {
            b.extend(v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * 28 * 28) as usize));
        b
    }

    #[test]
    fn idx_round_trip() {
        let x = parse_idx_images(&idx_images(2, 255)).unwrap();
        assert_eq!(x.shape(), &[2, 1, 28, 28]);
        assert!(x.iter().all(|&v| v == 1.0));
        let mut short = idx_images(2, 0);
        short.pop();
        assert!(parse_idx_images(&short).is_err());
        let mut l = Vec::new();
        l.extend(2049u32.to_be_bytes());
        l.extend(3u32.to_be_bytes());
        l.extend([0u8, 9, 4]);
        assert_eq!(parse_idx_labels(&l).unwrap(), vec![0, 9, 4]);
        assert!(parse_idx_labels(&idx_images(1, 0)).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut b = vec![7u8];
        b.extend(std::iter::repeat_n(51u8, 3072));
        let (px, l) = parse_cifar_batch(&b).unwrap();
        assert_eq!(l, vec![7]);
        assert!(px.iter().all(|&v| (v - 0.2).abs() < 1e-12));
        b[0] = 10;
        assert!(parse_cifar_batch(&b).is_err());
        assert!(parse_cifar_batch(&b[..100]).is_err());
    }

    #[test]
    fn checksum_mismatch_is_reported() {
        let mut sums = BTreeMap::new();
        sums.insert("f".to_string(), "00".repeat(32));
        let err = verify("f", b"abc", &sums).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
        sums.insert("f".to_string(), hex(&Sha256::digest(b"abc")));
        verify("f", b"abc", &sums).unwrap();
    }
}
