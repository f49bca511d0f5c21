//! Datasets: MNIST IDX files, a synthetic two-moons set, subsets and
//! batching.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "CERTITRAIN_DATA";

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]` or `[N, D]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel normalization folded into the network at build time.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.rows(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {y} outside {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        let channels = if images.ndim() == 4 { images.shape()[1] } else { 1 };
        Ok(Self {
            images,
            labels,
            num_classes,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.select(idx);
        (d.images, d.labels)
    }

    /// First `k` samples after a seeded shuffle.
    pub fn subset(&self, k: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k.min(self.len()));
        self.select(&idx)
    }

    /// Splits off the last `fraction` of the samples.
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let tail = ((n as f64) * fraction).round() as usize;
        let cut = n - tail.min(n);
        let head: Vec<usize> = (0..cut).collect();
        let rest: Vec<usize> = (cut..n).collect();
        (self.select(&head), self.select(&rest))
    }

    /// Images with `(x - mean) / std` applied per channel.
    pub fn normalized_images(&self) -> Tensor {
        let c = self.mean.len();
        let inner = self.images.row_len() / c;
        let mut out = self.images.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1F, 0x8B]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, "truncated header"))
}

/// Loads an IDX image/label pair (raw or gzip).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gzip(images_path)?;
    let lab = read_maybe_gzip(labels_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(images_path, format!("expected image magic 0x803, found {magic:#x}")));
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(labels_path, format!("expected label magic 0x801, found {magic:#x}")));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let h = be_u32(&img, 8, images_path)? as usize;
    let w = be_u32(&img, 12, images_path)? as usize;
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if n != nl {
        return Err(format_err(images_path, format!("{n} images but {nl} labels")));
    }
    let pixels = img
        .get(16..16 + n * h * w)
        .ok_or_else(|| format_err(images_path, format!("truncated: expected {} pixel bytes", n * h * w)))?;
    let labels = lab
        .get(8..8 + n)
        .ok_or_else(|| format_err(labels_path, format!("truncated: expected {n} label bytes")))?;
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let num_classes = 10;
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(format_err(labels_path, format!("label {y} out of range")));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    Dataset::new(images, labels, num_classes)
}

/// Dataset root from an explicit flag, else from `CERTITRAIN_DATA`.
pub fn data_root(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

fn find_file(root: &Path, stem: &str) -> Result<PathBuf> {
    let candidates = [
        root.join(stem),
        root.join(format!("{stem}.gz")),
        root.join("MNIST").join("raw").join(stem),
        root.join("MNIST").join("raw").join(format!("{stem}.gz")),
        root.join("mnist").join(stem),
        root.join("mnist").join(format!("{stem}.gz")),
    ];
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| {
            Error::io(
                root.join(stem),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            )
        })
}

/// MNIST train (`train = true`) or test split under `root`.
pub fn load_mnist(root: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let images = find_file(root, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_file(root, &format!("{prefix}-labels-idx1-ubyte"))?;
    load_mnist_idx(&images, &labels)
}

/// Two interleaved half circles scaled into `[0, 1]^2`; even indices are
/// class 0, odd indices class 1.
pub fn synthetic_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("moons needs at least 2 samples".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument("noise must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.gen_range(0.0..=PI);
        let class = i % 2;
        let (x, y) = moon_point(class, t);
        let (mut x, mut y) = scale_moon(x, y);
        if noise > 0.0 {
            x += normal.sample(&mut rng);
            y += normal.sample(&mut rng);
        }
        data.push(x.clamp(0.0, 1.0));
        data.push(y.clamp(0.0, 1.0));
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// Unscaled arc point: class 0 on the upper unit half circle, class 1 on the
/// lower half circle shifted by `(1, 0.5)`.
pub fn moon_point(class: usize, t: f64) -> (f64, f64) {
    if class == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    }
}

/// Maps `[-1, 2] x [-0.5, 1]` onto `[0, 1]^2`.
pub fn scale_moon(x: f64, y: f64) -> (f64, f64) {
    ((x + 1.0) / 3.0, (y + 0.5) / 1.5)
}

/// Batch index lists for one epoch: a permutation seeded by `(seed, epoch)`
/// cut into chunks, the last possibly smaller.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mixed = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over `(images, labels)` batches of one epoch.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + '_> {
    let idx = batch_indices(dataset.len(), batch_size, seed, epoch)?;
    Ok(idx.into_iter().map(move |b| dataset.batch(&b)))
}

#[cfg(test)]
mod tests;
