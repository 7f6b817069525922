//! Binary checkpoint container.
//!
//! Layout (little-endian): the magic `FFGA`, a `u32` format version, a
//! `u32`-prefixed UTF-8 JSON architecture descriptor, a `u32` array count,
//! then per array a `u32`-prefixed name, a `u32` rank, `u32` extents and
//! the `f32` values.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FFGA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: missing magic header")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),

    #[error("checkpoint does not match the network: {0}")]
    Mismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub arrays: Vec<NamedArray>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Malformed(format!("ran out of bytes reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, self.descriptor.len())?;
        out.extend_from_slice(self.descriptor.as_bytes());
        put_u32(&mut out, self.arrays.len())?;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(CheckpointError::Malformed(format!(
                    "array {} has inconsistent extents",
                    a.name
                )));
            }
            put_u32(&mut out, a.name.len())?;
            out.extend_from_slice(a.name.as_bytes());
            put_u32(&mut out, a.shape.len())?;
            for &d in &a.shape {
                put_u32(&mut out, d)?;
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let descriptor = r.string("descriptor")?;
        let count = r.u32("array count")?;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string("array name")?;
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("extents of {name} overflow")))?;
            let raw = r.take(len.saturating_mul(4), "array data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes after the last array".into()));
        }
        Ok(Checkpoint { descriptor, arrays })
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, CheckpointError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing array {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let bytes = self
            .to_bytes()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        w.write_all(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            descriptor: "{\"a\":1}".into(),
            arrays: vec![
                NamedArray {
                    name: "w".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5],
                },
                NamedArray {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![0.25],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.arrays[0].data[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE"),
            Err(CheckpointError::BadMagic)
        ));
        let bytes = sample().to_bytes().unwrap();
        for cut in [5, 12, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Malformed(_))
            ));
        }
    }

    #[test]
    fn rejects_other_versions() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }
}
