//! CIFAR-10 binary loader, per-channel standardization, batching and a
//! synthetic stand-in dataset for tests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3072;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing data file {0}")]
    Missing(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: length {len} is not a multiple of {CIFAR_RECORD_BYTES}-byte records")]
    Truncated { path: PathBuf, len: usize },
    #[error("{path}: record {record} has label {label}, expected 0..10")]
    BadLabel { path: PathBuf, record: usize, label: u8 },
    #[error("dataset is empty")]
    Empty,
    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images as an `N x C x H x W` tensor plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self, DataError> {
        if images.dims().len() != 4 || images.dims()[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} labels for image tensor of shape {:?}",
                labels.len(),
                images.dims()
            )));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    fn sample_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let sz = self.sample_len();
        let src = self.images.values();
        let mut values = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            values.extend_from_slice(&src[i * sz..(i + 1) * sz]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![indices.len(), c, h, w], values).expect("non-empty gather"), labels)
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn subset(&self, n: usize) -> Result<Dataset, DataError> {
        if n == 0 {
            return Err(DataError::Empty);
        }
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Ok(Dataset { images, labels, split: self.split })
    }
}

/// Parses concatenated 3073-byte records: one label byte, then the red,
/// green and blue 32x32 planes in row-major order, scaled by 1/255.
pub fn parse_cifar_records(path: &Path, bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(DataError::Truncated { path: path.to_path_buf(), len: bytes.len() });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(DataError::BadLabel { path: path.to_path_buf(), record: i, label: rec[0] });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn read_batches(dir: &Path, files: &[&str], split: Split) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(DataError::Missing(path));
        }
        let bytes = fs::read(&path).map_err(|source| DataError::Io { path: path.clone(), source })?;
        let (p, l) = parse_cifar_records(&path, &bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels).expect("record layout");
    Dataset::new(images, labels, split)
}

/// Loads the binary CIFAR-10 archive from `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if !dir.join(CIFAR_TEST_FILE).is_file() && nested.join(CIFAR_TEST_FILE).is_file() {
        nested
    } else {
        dir.to_path_buf()
    };
    let train = read_batches(&root, &CIFAR_TRAIN_FILES, Split::Train)?;
    let test = read_batches(&root, &[CIFAR_TEST_FILE], Split::Test)?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

/// Per-channel mean and population standard deviation.
pub fn compute_stats(ds: &Dataset) -> Result<ChannelStats, DataError> {
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    let (c, h, w) = ds.image_dims();
    let plane = h * w;
    let count = (ds.len() * plane) as f64;
    let v = ds.images.values();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let chan = |n: usize| &v[(n * c + ch) * plane..(n * c + ch + 1) * plane];
        let m = (0..ds.len()).map(|n| chan(n).iter().sum::<f64>()).sum::<f64>() / count;
        let var = (0..ds.len())
            .map(|n| chan(n).iter().map(|x| (x - m) * (x - m)).sum::<f64>())
            .sum::<f64>()
            / count;
        mean[ch] = m;
        std[ch] = var.sqrt();
    }
    Ok(ChannelStats { mean, std })
}

/// `x <- (x - mean_c) / std_c` for every channel.
pub fn normalize(ds: &Dataset, stats: &ChannelStats) -> Result<Dataset, DataError> {
    let (c, h, w) = ds.image_dims();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(DataError::Invalid(format!("stats for {} channels, data has {c}", stats.mean.len())));
    }
    if let Some(ch) = stats.std.iter().position(|&s| s <= 0.0) {
        return Err(DataError::ZeroStd(ch));
    }
    let plane = h * w;
    let mut images = ds.images.detached();
    for (i, x) in images.values_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *x = (*x - stats.mean[ch]) / stats.std[ch];
    }
    Ok(Dataset { images, labels: ds.labels.clone(), split: ds.split })
}

/// Index batches covering every sample exactly once; the last may be short.
pub fn batches(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Balanced class-conditional images: each class has a colour and a
/// Gaussian blob at its own location, plus per-pixel noise.
pub fn synthetic_dataset(n: usize, classes: usize, seed: u64) -> Result<Dataset, DataError> {
    synthetic_dataset_sized(n, classes, 32, seed)
}

pub fn synthetic_dataset_sized(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset, DataError> {
    if classes == 0 || n < classes {
        return Err(DataError::Invalid(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    if size == 0 {
        return Err(DataError::Invalid("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<(f64, f64, [f64; 3])> = (0..classes)
        .map(|_| {
            let cy = rng.random_range(0.2..0.8) * size as f64;
            let cx = rng.random_range(0.2..0.8) * size as f64;
            let colour = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            (cy, cx, colour)
        })
        .collect();
    let noise = Normal::new(0.0, 0.25).expect("positive std");
    let sigma2 = 2.0 * (size as f64 / 5.0).powi(2);
    let plane = size * size;
    let mut values = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let (cy, cx, colour) = prototypes[label];
        let jy = cy + rng.random_range(-1.0..1.0);
        let jx = cx + rng.random_range(-1.0..1.0);
        for tint in colour {
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - jy).powi(2) + (x as f64 - jx).powi(2);
                    let blob = (-d2 / sigma2).exp();
                    values.push(0.5 * tint + blob * tint + noise.sample(&mut rng));
                }
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, 3, size, size], values).expect("size > 0");
    Dataset::new(images, labels, Split::Train)
}
