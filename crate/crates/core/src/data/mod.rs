//! Datasets: bit-exact IDX / CIFAR-10 binary loaders, per-channel
//! standardization, seeded batching, and synthetic class generators.

mod batch;
mod cifar;
mod idx;
mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{batches, Batch, Batches};
pub use cifar::{load_cifar10, write_cifar10, CIFAR_RECORD_LEN};
pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{synthetic_classes, Preset, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated {what}")]
    Truncated { path: PathBuf, what: &'static str },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: length {len} is not a positive multiple of the {record}-byte record")]
    BadLength { path: PathBuf, len: usize, record: usize },

    #[error("{path}: label {label} outside 0..{classes}")]
    BadLabel {
        path: PathBuf,
        label: usize,
        classes: usize,
    },

    #[error("dataset `{0}` is empty")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Unspecified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub classes: usize,
    pub split: Split,
}

/// Images `N × C × H × W` in `[0, 1]` (until standardized) with class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        let d = Dataset { images, labels, meta };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.images.dims4("dataset")?;
        if dims[0] != self.labels.len() {
            return Err(DataError::CountMismatch {
                images: dims[0],
                labels: self.labels.len(),
            }
            .into());
        }
        if self.labels.is_empty() {
            return Err(DataError::Empty(self.meta.name.clone()).into());
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= self.meta.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.meta.classes,
            });
        }
        self.images.ensure_finite("dataset images")
    }

    /// The first `n` samples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Dataset::new(
            Tensor::from_vec(&[indices.len(), c, h, w], data)?,
            labels,
            self.meta.clone(),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.meta.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel moments, computed on a train split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardizes each channel to zero mean and unit (population) std. Pass
/// the train split's stats to reuse them on another split. A channel with
/// zero spread maps to zeros.
pub fn standardize(d: &Dataset, stats: Option<&ChannelStats>) -> Result<(Dataset, ChannelStats)> {
    let [n, c, h, w] = d.images.dims4("standardize")?;
    let inner = h * w;
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != c || s.std.len() != c {
                return Err(Error::shape(
                    "standardize",
                    format!("stats cover {} channels, images have {c}", s.mean.len()),
                ));
            }
            s.clone()
        }
        None => {
            let count = (n * inner) as f64;
            let mut mean = vec![0.0; c];
            let mut std = vec![0.0; c];
            for ch in 0..c {
                let plane = |i: usize| &d.images.data()[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                let s: f64 = (0..n).map(|i| plane(i).iter().map(|&v| v as f64).sum::<f64>()).sum();
                let mu = s / count;
                let ss: f64 = (0..n)
                    .map(|i| plane(i).iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>())
                    .sum();
                mean[ch] = mu;
                std[ch] = (ss / count).sqrt();
            }
            ChannelStats { mean, std }
        }
    };
    let mut out = d.images.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (idx / inner) % c;
        *v = if stats.std[ch] > 0.0 {
            ((*v as f64 - stats.mean[ch]) / stats.std[ch]) as f32
        } else {
            0.0
        };
    }
    Ok((
        Dataset {
            images: out,
            labels: d.labels.clone(),
            meta: d.meta.clone(),
        },
        stats,
    ))
}
