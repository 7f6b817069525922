//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! the red, green and blue 32×32 planes.

use std::path::Path;

use super::idx::{read_bytes, write_bytes};
use super::{DataError, Dataset, DatasetMeta, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 3073;
const CLASSES: usize = 10;
const PLANE: usize = 32 * 32;

/// Loads and concatenates one or more batch files.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P], name: &str, split: Split) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = read_bytes(p)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DataError::BadLength {
                path: p.to_path_buf(),
                len: bytes.len(),
                record: CIFAR_RECORD_LEN,
            }
            .into());
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(DataError::BadLabel {
                    path: p.to_path_buf(),
                    label,
                    classes: CLASSES,
                }
                .into());
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty(name.to_string()).into());
    }
    Dataset::new(
        Tensor::from_vec(&[labels.len(), 3, 32, 32], data)?,
        labels,
        DatasetMeta {
            name: name.to_string(),
            classes: CLASSES,
            split,
        },
    )
}

pub fn write_cifar10(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let [n, c, h, w] = d.images.dims4("write_cifar10")?;
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::shape(
            "write_cifar10",
            format!("records hold 3×32×32 images, got {c}×{h}×{w}"),
        ));
    }
    let mut out = Vec::with_capacity(n * CIFAR_RECORD_LEN);
    for (i, &label) in d.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            d.images.data()[i * 3 * PLANE..(i + 1) * 3 * PLANE]
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    write_bytes(path.as_ref(), &out)
}
