//! Image classification data: IDX (MNIST, Fashion-MNIST) and CIFAR-10
//! binary loaders, synthetic Gaussian blobs, stratified subsets.
//!
//! Pixels are scaled to `[0, 1]` and standardized per channel with
//! statistics of the training split (after the validation hold-out).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Domain, RngStream};
use crate::tensor::{Real, Tensor};

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "WALKNOISE_DATA";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

/// Fraction of the training file held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnistVariant {
    Mnist,
    Fashion,
}

impl MnistVariant {
    pub fn dir_name(&self) -> &'static str {
        match self {
            MnistVariant::Mnist => "mnist",
            MnistVariant::Fashion => "fashion",
        }
    }
}

impl Dataset {
    pub fn new(name: &str, images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {classes} classes")));
        }
        Ok(Dataset {
            name: name.to_string(),
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the given rows as a batch tensor plus labels.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let item = self.images.item_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * item);
        for &i in indices {
            data.extend(src[i * item..(i + 1) * item].iter().map(|&v| T::from_f64(v as f64)));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (
            Tensor::new(shape, data).expect("gather shape"),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Rows `indices` as a new dataset.
    pub fn select(&self, indices: &[usize], split: Split) -> Dataset {
        let (images, labels) = self.gather::<f32>(indices);
        Dataset {
            name: self.name.clone(),
            images,
            labels,
            classes: self.classes,
            split,
        }
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.item_shape();
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.images.data().chunks(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let m = (self.len() * plane) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / m) - (s / m).powi(2)).max(0.0).sqrt())
            .collect();
        mean.iter_mut().for_each(|v| *v /= m);
        Normalization { mean, std }
    }

    pub fn normalize(&mut self, norm: &Normalization) {
        let [c, h, w] = self.item_shape();
        let plane = h * w;
        for img in self.images.data_mut().chunks_mut(c * plane) {
            for ch in 0..c {
                let (m, s) = (norm.mean[ch], norm.std[ch]);
                let s = if s > 0.0 { s } else { 1.0 };
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
    }
}

/// Deterministic shuffled hold-out split of `full` into train/val,
/// then normalization of all three splits with train statistics.
fn finish_splits(full: Dataset, mut test: Dataset, seed: u64) -> Splits {
    let n = full.len();
    let n_val = ((n as f64) * VAL_FRACTION).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngStream::new(seed, Domain::Data).generator());
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let mut train = full.select(&train_idx, Split::Train);
    let mut val = full.select(&val_idx, Split::Val);
    let norm = train.channel_stats();
    train.normalize(&norm);
    val.normalize(&norm);
    test.normalize(&norm);
    test.split = Split::Test;
    Splits {
        train,
        val,
        test,
        normalization: norm,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

/// Parses an IDX3 image file into `[N, 1, rows, cols]` pixels in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 8,
            detail: format!("degenerate image size {rows}x{cols}"),
        });
    }
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 16 + body.len().min(n * rows * cols) as u64,
            detail: format!("expected {} pixel bytes for {n}x{rows}x{cols}, found {}", n * rows * cols, body.len()),
        });
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// Parses an IDX1 label file, checking every label against `classes`.
pub fn parse_idx_labels(bytes: &[u8], path: &Path, classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 8 + body.len().min(n) as u64,
            detail: format!("expected {n} labels, found {}", body.len()),
        });
    }
    body.iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < classes {
                Ok(b as usize)
            } else {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    offset: 8 + i as u64,
                    detail: format!("label {b} out of range for {classes} classes"),
                })
            }
        })
        .collect()
}

fn load_idx_pair(dir: &Path, prefix: &str, name: &str, split: Split) -> Result<Dataset> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lab_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let images = parse_idx_images(&read_file(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read_file(&lab_path)?, &lab_path, 10)?;
    if images.batch() != labels.len() {
        return Err(Error::Parse {
            path: lab_path,
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), images.batch()),
        });
    }
    Dataset::new(name, images, labels, 10, split)
}

/// Loads `train-*` and `t10k-*` IDX files from `dir` (the standard MNIST and
/// Fashion-MNIST file names, uncompressed).
pub fn load_mnist_like(dir: &Path, variant: MnistVariant, seed: u64) -> Result<Splits> {
    let name = variant.dir_name();
    let full = load_idx_pair(dir, "train", name, Split::Train)?;
    let test = load_idx_pair(dir, "t10k", name, Split::Test)?;
    Ok(finish_splits(full, test, seed))
}

fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let expected = (CIFAR_RECORD * CIFAR_RECORDS_PER_FILE) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::FileLength {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut pixels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// CIFAR-10 binary version: `data_batch_1..5.bin` and `test_batch.bin`,
/// either directly in `dir` or in `dir/cifar-10-batches-bin`.
pub fn load_cifar10(dir: &Path, seed: u64) -> Result<Splits> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let load = |files: &[String], split| -> Result<Dataset> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let path = dir.join(f);
            let (p, l) = parse_cifar_batch(&read_file(&path)?, &path)?;
            pixels.extend(p);
            labels.extend(l);
        }
        let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
        Dataset::new("cifar10", images, labels, 10, split)
    };
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let full = load(&train_files, Split::Train)?;
    let test = load(&["test_batch.bin".to_string()], Split::Test)?;
    Ok(finish_splits(full, test, seed))
}

/// `K` isotropic unit-variance Gaussian clusters in `dim` dimensions, shaped
/// `[N, 1, 1, dim]`. Class centers lie at `separation` times a random unit
/// vector, so `separation = 0` makes all classes identically distributed.
pub fn synthetic_gaussian_blobs(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("blobs need at least 2 classes".into()));
    }
    if separation < 0.0 || !separation.is_finite() || dim == 0 {
        return Err(Error::InvalidArgument("blobs need separation >= 0 and dim >= 1".into()));
    }
    let mut g = RngStream::new(seed, Domain::Data).layer(1).generator();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| g.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| separation * x / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for i in 0..classes * n_per_class {
        let k = i % classes;
        labels.push(k);
        for c in &centers[k] {
            let z: f64 = g.sample(StandardNormal);
            data.push((c + z) as f32);
        }
    }
    let images = Tensor::new(vec![labels.len(), 1, 1, dim], data)?;
    Dataset::new("blobs", images, labels, classes, Split::Train)
}

/// Blobs with the usual train/val/test layout (test drawn with its own seed).
pub fn synthetic_splits(classes: usize, n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Splits> {
    let full = synthetic_gaussian_blobs(classes, n_per_class, dim, separation, seed)?;
    let test_n = (n_per_class / 4).max(1);
    // same centers, fresh samples: regenerate with the same seed and keep the tail
    let both = synthetic_gaussian_blobs(classes, n_per_class + test_n, dim, separation, seed)?;
    let tail: Vec<usize> = (classes * n_per_class..both.len()).collect();
    let test = both.select(&tail, Split::Test);
    Ok(finish_splits(full, test, seed))
}

/// Class-balanced deterministic subset of `n` rows: each class gets
/// `n / K` rows (the remainder to the lowest class indices), topped up from
/// other classes when a class runs short.
pub fn subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let k = dataset.classes;
    if n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} from {} rows",
            dataset.len()
        )));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("subset of {n} cannot cover {k} classes")));
    }
    if n == dataset.len() {
        return Ok(dataset.clone());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut g = RngStream::new(seed, Domain::Data).layer(2).generator();
    for rows in &mut by_class {
        rows.shuffle(&mut g);
    }
    let mut quota: Vec<usize> = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
    // move quota away from classes that are too small
    let mut spare = 0;
    for c in 0..k {
        if quota[c] > by_class[c].len() {
            spare += quota[c] - by_class[c].len();
            quota[c] = by_class[c].len();
        }
    }
    while spare > 0 {
        // smallest quota with room left, lowest class index on ties
        let Some(c) = (0..k)
            .filter(|&c| quota[c] < by_class[c].len())
            .min_by_key(|&c| quota[c])
        else {
            break;
        };
        quota[c] += 1;
        spare -= 1;
    }
    let mut picked: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .flat_map(|(rows, &q)| rows[..q].iter().copied())
        .collect();
    picked.sort_unstable();
    Ok(dataset.select(&picked, dataset.split))
}

/// Dataset cache directory: `$WALKNOISE_DATA`, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads a named dataset: `mnist`, `fashion`, `cifar10`, or `blobs`
/// (10 classes, 64 dims, a fixed synthetic stand-in for fast runs).
pub fn load_named(name: &str, data_dir: &Path, seed: u64) -> Result<Splits> {
    match name {
        "mnist" => load_mnist_like(&data_dir.join("mnist"), MnistVariant::Mnist, seed),
        "fashion" | "fashion-mnist" => load_mnist_like(&data_dir.join("fashion"), MnistVariant::Fashion, seed),
        "cifar10" | "cifar-10" => load_cifar10(&data_dir.join("cifar10"), seed),
        "blobs" => synthetic_splits(10, 200, 64, 4.0, seed),
        other => Err(Error::InvalidArgument(format!("unknown dataset {other:?}"))),
    }
}
