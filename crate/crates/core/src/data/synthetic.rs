//! Seeded synthetic image classes for tests and quick experiments.
//!
//! Every class owns a binary texture mask, a family of thin lines with its
//! own orientation and spacing. A sample's pixel is
//! `sigmoid(separation · (mask − ½) + ε)` with `ε ~ N(0, 1)`, so large
//! separations push each class mean toward its mask. Masks of different
//! classes never share a pixel (except the deliberate overlap in
//! [`Preset::Skewed`]), which makes the class means orthogonal in the limit.
//! Textures rather than positions tell the classes apart because a
//! goodness head averages over space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, DatasetMeta, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// One line texture per class, pairwise disjoint.
    Disjoint,
    /// Classes 0 and 1 share a dense texture and differ only by a sparse
    /// private one, so their means are nearly parallel; the remaining
    /// classes stay disjoint from everything.
    Skewed,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// `[C, H, W]`; every channel carries the same mask.
    pub shape: [usize; 3],
    pub separation: f64,
    pub preset: Preset,
    pub seed: u64,
}

/// Lines of one orientation: horizontal, vertical, diagonal, anti-diagonal.
fn on_line(family: usize, spacing: usize, offset: usize, r: usize, c: usize) -> bool {
    let s = spacing as i64;
    let (r, c, o) = (r as i64, c as i64, offset as i64);
    let v = match family % 4 {
        0 => r,
        1 => c,
        2 => r + c,
        _ => r - c,
    };
    v.rem_euclid(s) == o.rem_euclid(s)
}

fn masks(spec: &SyntheticSpec) -> Result<Vec<Vec<bool>>> {
    let [_, h, w] = spec.shape;
    let k = spec.classes;
    let px = |f: &dyn Fn(usize, usize) -> bool| -> Vec<bool> { (0..h * w).map(|p| f(p / w, p % w)).collect() };
    // Candidate textures before overlaps are resolved.
    let mut cand: Vec<Vec<bool>> = Vec::with_capacity(k);
    let first_free = match spec.preset {
        Preset::Disjoint => 0,
        Preset::Skewed => {
            if k < 2 {
                return Err(Error::config("the skewed preset needs at least two classes"));
            }
            let shared = |r: usize, _c: usize| r.is_multiple_of(4);
            // Class 0 adds short horizontal dashes between the shared lines,
            // class 1 short vertical stubs hanging off them.
            cand.push(px(&|r, c| shared(r, c) || (r % 4 == 2 && c % 4 == 1)));
            cand.push(px(&|r, c| shared(r, c) || (r % 4 == 1 && c % 4 == 3)));
            2
        }
    };
    for class in first_free..k {
        // Diagonals first in the skewed layout so the free classes look
        // nothing like the shared horizontal texture.
        let idx = class - first_free;
        let family = match spec.preset {
            Preset::Disjoint => idx % 4,
            Preset::Skewed => [2, 3, 1, 0][idx % 4],
        };
        let spacing = 4 + idx / 4;
        let offset = if spec.preset == Preset::Skewed { 2 } else { 0 };
        cand.push(px(&|r, c| on_line(family, spacing, offset + idx / 4, r, c)));
    }
    // A pixel claimed by several classes belongs to none of them, except
    // the shared texture of the skewed pair.
    let mut out = cand.clone();
    for p in 0..h * w {
        let owners: Vec<usize> = (0..k).filter(|&j| cand[j][p]).collect();
        let pair_only = spec.preset == Preset::Skewed && owners == [0, 1];
        if owners.len() > 1 && !pair_only {
            for &j in &owners {
                out[j][p] = false;
            }
        }
    }
    if let Some(j) = out.iter().position(|m| !m.iter().any(|&b| b)) {
        return Err(Error::config(format!(
            "a {h}×{w} image is too small to give class {j} of {k} its own texture"
        )));
    }
    Ok(out)
}

/// Generates `classes · per_class` samples, grouped by class in label
/// order. Reproducible for a given spec.
pub fn synthetic_classes(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.shape.contains(&0) {
        return Err(Error::config(
            "synthetic data needs positive class count, sample count and shape",
        ));
    }
    if !spec.separation.is_finite() {
        return Err(Error::config("separation must be finite"));
    }
    let masks = masks(spec)?;
    let [c, h, w] = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for (class, mask) in masks.iter().enumerate() {
        for _ in 0..spec.per_class {
            for _ in 0..c {
                for &m in mask {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let z = spec.separation * (if m { 0.5 } else { -0.5 }) + eps;
                    data.push((1.0 / (1.0 + (-z).exp())) as f32);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::from_vec(&[n, c, h, w], data)?,
        labels,
        DatasetMeta {
            name: format!("synthetic-{:?}", spec.preset).to_lowercase(),
            classes: spec.classes,
            split: Split::Unspecified,
        },
    )
}
