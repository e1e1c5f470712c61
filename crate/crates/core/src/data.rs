//! IDX (MNIST-format) ingestion and minibatching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

/// Images `[N, C, H, W]` scaled to `[0, 1]` plus integer labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: Split, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::input(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::input(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(LabeledDataset { images, labels, split, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            class_count: self.class_count,
        }
    }

    /// Images and labels at `indices`, converted to the model's element type.
    pub fn gather<T: Element>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend(self.images.data()[i * row..(i + 1) * row].iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = Tensor::new(&shape, data).expect("gathered rows match their shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn ingest_err(path: &Path, field: &'static str, message: impl Into<String>) -> Error {
    Error::Ingestion { path: path.to_path_buf(), field, message: message.into() }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingest_err(path, field, "file ends inside the header"))
}

/// Parse an IDX image file (`0x00000803`, big-endian `N, rows, cols`, then `u8` pixels).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(ingest_err(path, "magic", format!("expected {IMAGES_MAGIC:#010x}, found {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path, "count")? as usize;
    let rows = read_u32(bytes, 8, path, "rows")? as usize;
    let cols = read_u32(bytes, 12, path, "cols")? as usize;
    let payload = &bytes[16..];
    let expected = n * rows * cols;
    if payload.len() != expected {
        return Err(ingest_err(
            path,
            "payload",
            format!("header promises {expected} pixel bytes, file holds {}", payload.len()),
        ));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

/// Parse an IDX label file (`0x00000801`, big-endian `N`, then `u8` labels).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(ingest_err(path, "magic", format!("expected {LABELS_MAGIC:#010x}, found {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path, "count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(ingest_err(
            path,
            "payload",
            format!("header promises {n} labels, file holds {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ingest_err(path, "file", e.to_string()))
}

/// Load a pair of IDX files; pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split, class_count: usize) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(ingest_err(
            labels_path,
            "count",
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
        return Err(ingest_err(labels_path, "label", format!("label {bad} outside 0..{class_count}")));
    }
    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = if n == 0 {
        Tensor::new(&[0, 1, rows, cols], Vec::new())?
    } else {
        Tensor::new(&[n, 1, rows, cols], data)?
    };
    LabeledDataset::new(images, labels.into_iter().map(usize::from).collect(), split, class_count)
}

/// Standard file names of an MNIST-layout directory.
pub fn idx_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Load one split of an MNIST-layout directory (10 classes).
pub fn load_split(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let (images, labels) = idx_paths(dir, split);
    load_idx(&images, &labels, split, 10)
}

/// Sample index order for one epoch: identity, or a seeded shuffle.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, shuffle: bool, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Iterator over `(images, labels)` minibatches covering every sample once.
pub struct Batches<'a, T> {
    dataset: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _elem: std::marker::PhantomData<T>,
}

impl<'a, T: Element> Iterator for Batches<'a, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

pub fn batches<'a, T: Element, R: Rng + ?Sized>(
    dataset: &'a LabeledDataset,
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Batches<'a, T>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok(Batches {
        dataset,
        order: epoch_order(dataset.len(), shuffle, rng),
        batch_size,
        pos: 0,
        _elem: std::marker::PhantomData,
    })
}
