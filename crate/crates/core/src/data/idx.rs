//! IDX files (the MNIST / Fashion-MNIST distribution format). Paths ending
//! in `.gz` are decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, Dataset, DatasetMeta, Split};
use crate::error::Result;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub(super) fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let len = 4 + 4 * dims;
    if bytes.len() < len {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            what: "header",
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    Ok((0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect())
}

/// Loads an image/label file pair. Pixels are scaled by 1/255; the class
/// count is one past the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, name: &str, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read_bytes(ip)?;
    let lb = read_bytes(lp)?;

    let idims = header(&ib, ip, IDX_IMAGES_MAGIC, 3)?;
    let ldims = header(&lb, lp, IDX_LABELS_MAGIC, 1)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ldims[0],
        }
        .into());
    }
    let pixels = &ib[16..];
    if pixels.len() < n * rows * cols {
        return Err(DataError::Truncated {
            path: ip.to_path_buf(),
            what: "pixel data",
        }
        .into());
    }
    let label_bytes = &lb[8..];
    if label_bytes.len() < n {
        return Err(DataError::Truncated {
            path: lp.to_path_buf(),
            what: "label data",
        }
        .into());
    }
    if n == 0 {
        return Err(DataError::Empty(name.to_string()).into());
    }

    let data: Vec<f32> = pixels[..n * rows * cols].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[..n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Tensor::from_vec(&[n, 1, rows, cols], data)?,
        labels,
        DatasetMeta {
            name: name.to_string(),
            classes,
            split,
        },
    )
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a single-channel dataset back to an IDX pair (uncompressed, or
/// gzip when a path ends in `.gz`).
pub fn write_idx(d: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let [n, c, h, w] = d.images.dims4("write_idx")?;
    if c != 1 {
        return Err(crate::error::Error::shape(
            "write_idx",
            format!("IDX holds one channel, dataset has {c}"),
        ));
    }
    let mut ib = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(d.images.data().iter().map(|&v| to_byte(v)));

    let mut lb = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(d.labels.iter().map(|&l| l as u8));

    write_bytes(images.as_ref(), &ib)?;
    write_bytes(labels.as_ref(), &lb)
}

pub(super) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    if path.extension().is_some_and(|e| e == "gz") {
        let f = fs::File::create(path)?;
        let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}
