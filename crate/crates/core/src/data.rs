//! Dataset generation, IDX image loading, splitting, and batching.
//!
//! Two seeded synthetic 2-D generators cover the experimental needs — a
//! linearly separable pair of Gaussian blobs and a non-linearly-separable
//! pair of interleaved spirals — plus an IDX-format reader for small image
//! subsets. Everything is deterministic per seed, and datasets are immutable
//! once built.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{rng_for, rng_from_seed};
use crate::tensor::Tensor;

/// An immutable labeled dataset: `n` rows of `d` features with integer
/// labels in `[0, n_classes)` and an optional per-feature bounding box.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// When present, every coordinate of every sample lies in `[lo, hi]`.
    pub feature_box: Option<(f64, f64)>,
}

/// One training batch: a row-slice of the dataset plus the original row
/// indices it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// How to split a dataset into train and validation parts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    /// Fraction of samples that go to the training split, in (0, 1).
    pub train_frac: f64,
    pub shuffle_seed: u64,
}

impl Dataset {
    pub fn new(
        x: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        feature_box: Option<(f64, f64)>,
    ) -> Result<Self> {
        if x.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: x.shape.clone(),
                right: vec![0, 0],
            });
        }
        let n = x.rows();
        if n == 0 {
            return Err(Error::contract("dataset must contain at least one sample"));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        if n_classes < 2 {
            return Err(Error::contract(format!(
                "dataset needs at least 2 classes, got {n_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if let Some((i, &v)) = x.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "dataset",
                index: i,
                value: v,
            });
        }
        if let Some((lo, hi)) = feature_box {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::contract(format!(
                    "feature box must satisfy lo < hi, got ({lo}, {hi})"
                )));
            }
            if let Some(&v) = x.data.iter().find(|&&v| v < lo || v > hi) {
                return Err(Error::contract(format!(
                    "sample coordinate {v} lies outside the declared feature box"
                )));
            }
        }
        Ok(Dataset {
            x,
            labels,
            n_classes,
            feature_box,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::contract("subset of zero rows is not a dataset"));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "subset index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.x.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor::new(vec![indices.len(), d], data)?,
            labels,
            self.n_classes,
            self.feature_box,
        )
    }

    /// Seeded-shuffle partition into non-empty train and validation parts.
    pub fn split(&self, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
        if !(spec.train_frac > 0.0 && spec.train_frac < 1.0) {
            return Err(Error::config(format!(
                "train_frac must lie strictly inside (0, 1), got {}",
                spec.train_frac
            )));
        }
        let n = self.len();
        let n_train = (n as f64 * spec.train_frac).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::config(format!(
                "split of {n} samples at train_frac {} leaves an empty part",
                spec.train_frac
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(spec.shuffle_seed));
        let train = self.subset(&order[..n_train])?;
        let val = self.subset(&order[n_train..])?;
        Ok((train, val))
    }

    /// Seeded-shuffle batching: `⌈n/B⌉` batches covering every sample exactly
    /// once, the last batch possibly smaller. The same `epoch_seed` always
    /// yields the same batch order.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from_seed(epoch_seed));
        order
            .chunks(batch_size)
            .map(|chunk| {
                let sub = self.subset(chunk)?;
                Ok(Batch {
                    x: sub.x,
                    labels: sub.labels,
                    indices: chunk.to_vec(),
                })
            })
            .collect()
    }
}

/// Two isotropic Gaussian blobs: `n/2` points per class with means at
/// `(∓separation/2, 0)` and noise standard deviation `sigma` (zero collapses
/// each class onto its mean exactly). Samples alternate classes, so any
/// prefix is (near-)balanced.
pub fn gen_two_gaussians(n: usize, separation: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::config(format!(
            "two-gaussians generator needs an even n >= 2, got {n}"
        )));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::config(format!(
            "separation must be positive and finite, got {separation}"
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!(
            "sigma must be non-negative and finite, got {sigma}"
        )));
    }
    let noise = Normal::new(0.0, sigma)
        .map_err(|e| Error::config(format!("invalid noise distribution: {e}")))?;
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let mean_x = if class == 0 {
            -separation / 2.0
        } else {
            separation / 2.0
        };
        data.push(mean_x + noise.sample(&mut rng));
        data.push(noise.sample(&mut rng));
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2, None)
}

/// Two interleaved Archimedean spirals with `n/2` points per class,
/// Gaussian positional noise, rescaled so every coordinate lies in
/// `[−1, 1]`. Samples alternate classes along the spiral parameter.
pub fn gen_spirals(n: usize, turns: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::config(format!(
            "spiral generator needs an even n >= 2, got {n}"
        )));
    }
    if !(turns >= 0.0) || !turns.is_finite() {
        return Err(Error::config(format!(
            "turns must be non-negative and finite, got {turns}"
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::config(format!(
            "noise must be non-negative and finite, got {noise}"
        )));
    }
    let jitter = Normal::new(0.0, noise)
        .map_err(|e| Error::config(format!("invalid noise distribution: {e}")))?;
    let mut rng = rng_from_seed(seed);
    let per_class = n / 2;
    let denom = (per_class.saturating_sub(1)).max(1) as f64;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = (i / 2) as f64 / denom;
        // Radius grows from a small core outward; offset avoids piling both
        // classes onto the origin at t = 0.
        let r = 0.1 + 0.9 * t;
        let theta = 2.0 * std::f64::consts::PI * turns * t + class as f64 * std::f64::consts::PI;
        data.push(r * theta.cos() + jitter.sample(&mut rng));
        data.push(r * theta.sin() + jitter.sample(&mut rng));
        labels.push(class);
    }
    let max_abs = data.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if max_abs > 1.0 {
        for v in &mut data {
            *v /= max_abs;
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2, None)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(format!(
            "truncated IDX header: {what} needs bytes {offset}..{end}, file has {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an IDX image/label file pair (big-endian, standard magics
/// `0x00000803` / `0x00000801`), scale pixels to `[0, 1]`, and flatten each
/// image row-major. `limit` keeps only the first samples. The class count is
/// the largest label plus one.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images = std::fs::read(images_path.as_ref())?;
    let labels_raw = std::fs::read(labels_path.as_ref())?;

    let magic = read_u32_be(&images, 0, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "images file magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n_images = read_u32_be(&images, 4, "image count")? as usize;
    let rows = read_u32_be(&images, 8, "image rows")? as usize;
    let cols = read_u32_be(&images, 12, "image cols")? as usize;

    let magic = read_u32_be(&labels_raw, 0, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "labels file magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n_labels = read_u32_be(&labels_raw, 4, "label count")? as usize;

    if n_images != n_labels {
        return Err(Error::format(format!(
            "images file holds {n_images} samples but labels file holds {n_labels}"
        )));
    }

    let take = limit.unwrap_or(n_images).min(n_images);
    if take == 0 {
        return Err(Error::contract("IDX load would produce an empty dataset"));
    }
    let d = rows * cols;
    let pixels_needed = 16 + take * d;
    if images.len() < pixels_needed {
        return Err(Error::format(format!(
            "truncated images file: need {pixels_needed} bytes for {take} samples, have {}",
            images.len()
        )));
    }
    let labels_needed = 8 + take;
    if labels_raw.len() < labels_needed {
        return Err(Error::format(format!(
            "truncated labels file: need {labels_needed} bytes for {take} samples, have {}",
            labels_raw.len()
        )));
    }

    let data: Vec<f64> = images[16..16 + take * d]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels_raw[8..8 + take].iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![take, d], data)?,
        labels,
        n_classes.max(2),
        Some((0.0, 1.0)),
    )
}

/// Uniformly sample `count` row indices without replacement.
pub fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[n as u64]));
    order.truncate(count.min(n));
    order
}

/// Convenience: uniformly random points in a box, useful for probing models
/// away from the data manifold.
pub fn random_points(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> Result<Tensor> {
    if lo >= hi {
        return Err(Error::config(format!(
            "random_points needs lo < hi, got ({lo}, {hi})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(vec![n, d], data)
}
