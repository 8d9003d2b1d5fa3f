//! MNIST ingestion, imbalanced split construction and seeded batching.

mod batch;
pub mod idx;
mod split;

pub use batch::{batches, Batch, BatchIter};
pub use split::{
    build_imbalanced_split, minority_train_count, round_half_up, ImbalanceSpec, SplitBundle,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use idx::{IdxArray, IdxError, IMAGE_MAGIC, LABEL_MAGIC};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Idx { path: PathBuf, source: IdxError },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: expected magic {expected}, found {found}", path.display())]
    WrongKind {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} needs {needed} samples, only {available} available")]
    Insufficient {
        label: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid imbalance spec: {0}")]
    InvalidSpec(String),
    #[error("batch size {0} is too small (training needs at least 2)")]
    BatchSize(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Images `[n×1×h×w]` scaled to `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Index of each sample in the source it was drawn from.
    pub sample_ids: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            sample_ids: rows.iter().map(|&i| self.sample_ids[i]).collect(),
        }
    }

    /// Builds a dataset from decoded image and label arrays.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Dataset, DataError> {
        if images.dims.len() != 3 || labels.dims.len() != 1 {
            return Err(TensorError::Invalid(format!(
                "expected [n×h×w] images and [n] labels, got {:?} and {:?}",
                images.dims, labels.dims
            ))
            .into());
        }
        let n = images.dims[0];
        if labels.data.len() != n {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.data.len(),
            });
        }
        let (h, w) = (images.dims[1], images.dims[2]);
        let pixels = images.data.iter().map(|&b| f64::from(b) / 255.0).collect();
        let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            images: Tensor::from_vec(&[n, 1, h, w], pixels)?,
            labels,
            class_names: (0..classes).map(|c| c.to_string()).collect(),
            sample_ids: (0..n).collect(),
        })
    }
}

fn read_idx(path: &Path, expected: u32) -> Result<IdxArray, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let array = idx::decode_idx(&bytes).map_err(|source| DataError::Idx {
        path: path.to_owned(),
        source,
    })?;
    if array.magic() != expected {
        return Err(DataError::WrongKind {
            path: path.to_owned(),
            expected,
            found: array.magic(),
        });
    }
    Ok(array)
}

/// Reads an image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = read_idx(images_path, IMAGE_MAGIC)?;
    let labels = read_idx(labels_path, LABEL_MAGIC)?;
    Dataset::from_idx(&images, &labels)
}

/// Standard MNIST file names, optionally with a `.gz` suffix.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// `dir/name`, or `dir/name.gz` when only the compressed file exists.
pub fn locate(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    if plain.exists() {
        return plain;
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        gz
    } else {
        plain
    }
}

/// The 60 000-sample MNIST training set in `dir`.
pub fn load_mnist_train(dir: &Path) -> Result<Dataset, DataError> {
    load_idx(&locate(dir, TRAIN_IMAGES), &locate(dir, TRAIN_LABELS))
}

/// The 10 000-sample MNIST test set in `dir`.
pub fn load_mnist_test(dir: &Path) -> Result<Dataset, DataError> {
    load_idx(&locate(dir, TEST_IMAGES), &locate(dir, TEST_LABELS))
}
