//! Class similarity analysis and per-class channel budgets.
//!
//! Classes that look alike (high summed cosine similarity of their mean
//! feature vectors) are harder to tell apart and receive more channels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Below this population std the complexity scores are treated as degenerate.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// `K × D`
    pub class_means: Vec<Vec<f64>>,
    /// `K × K` cosine similarities.
    pub matrix: Vec<Vec<f64>>,
    /// Standardized similarity row sums, one per class.
    pub complexity: Vec<f64>,
    pub sample_counts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// More channels to classes that resemble the others.
    ComplexityAware,
    Uniform,
    /// Complexity-aware allocation applied to negated complexity.
    WorstCase,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::ComplexityAware, Strategy::Uniform, Strategy::WorstCase];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ComplexityAware => "complexity_aware",
            Strategy::Uniform => "uniform",
            Strategy::WorstCase => "worst_case",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown allocation strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub channels_per_class: Vec<usize>,
    pub total: usize,
    pub strategy: Strategy,
    pub phi: f64,
}

impl Allocation {
    pub fn classes(&self) -> usize {
        self.channels_per_class.len()
    }

    /// Contiguous channel range owned by each class, in class order.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.channels_per_class
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_per_class.iter().sum::<usize>() != self.total {
            return Err(Error::config(format!(
                "allocation {:?} does not sum to {}",
                self.channels_per_class, self.total
            )));
        }
        if let Some(c) = self.channels_per_class.iter().position(|&s| s == 0) {
            return Err(Error::config(format!("class {c} has no channels allocated")));
        }
        Ok(())
    }
}

/// Mean feature row per class. `features` is `N × …`, flattened per sample.
pub fn class_means<T: Real>(features: &Tensor<T>, labels: &[usize], classes: usize) -> Result<Vec<Vec<f64>>> {
    let n = *features
        .shape()
        .first()
        .ok_or_else(|| Error::shape("class_means", "features must have a sample axis"))?;
    if labels.len() != n {
        return Err(Error::shape(
            "class_means",
            format!("{} labels for {} feature rows", labels.len(), n),
        ));
    }
    let d = features.len().checked_div(n).unwrap_or(0);
    let mut sums = vec![vec![0.0f64; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &label) in features.data().chunks(d.max(1)).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        counts[label] += 1;
        for (s, v) in sums[label].iter_mut().zip(row) {
            *s += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    for (c, (sum, &count)) in sums.iter_mut().zip(&counts).enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(c));
        }
        sum.iter_mut().for_each(|v| *v /= count as f64);
    }
    Ok(sums)
}

/// Pairwise cosine similarity. Rows with zero norm are similar to nothing,
/// themselves included.
pub fn similarity_matrix(means: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = means.len();
    if k < 2 {
        return Err(Error::config("similarity analysis needs at least two classes"));
    }
    let norms: Vec<f64> = means
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut s = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let v = if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else if a == b {
                1.0
            } else {
                let dot: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| x * y).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            s[a][b] = v;
            s[b][a] = v;
        }
    }
    Ok(s)
}

/// Row sums standardized to zero mean and unit population std. Degenerate
/// spread yields all zeros.
pub fn normalized_complexity(matrix: &[Vec<f64>]) -> Vec<f64> {
    let k = matrix.len();
    if k == 0 {
        return Vec::new();
    }
    let sums: Vec<f64> = matrix.iter().map(|r| r.iter().sum()).collect();
    let mu = sums.iter().sum::<f64>() / k as f64;
    let sigma = (sums.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / k as f64).sqrt();
    if sigma <= DEGENERATE_STD * mu.abs().max(1.0) {
        return vec![0.0; k];
    }
    sums.iter().map(|s| (s - mu) / sigma).collect()
}

/// Runs the full analysis on a labelled feature tensor.
pub fn analyze<T: Real>(features: &Tensor<T>, labels: &[usize], classes: usize) -> Result<SimilarityReport> {
    let class_means = class_means(features, labels, classes)?;
    let matrix = similarity_matrix(&class_means)?;
    let complexity = normalized_complexity(&matrix);
    let mut sample_counts = vec![0; classes];
    for &l in labels {
        sample_counts[l] += 1;
    }
    Ok(SimilarityReport {
        class_means,
        matrix,
        complexity,
        sample_counts,
    })
}

/// Splits `total` channels across classes.
///
/// Complexity-aware shares are `(s̃_j − min s̃ + φ) / Σ(·) · total`, floored;
/// leftovers go one each in descending fractional part (ties to the lower
/// class index). A class left with zero channels then takes one from the
/// largest holder, choosing the lowest-ranked class among equal holders so
/// the ordering by complexity is preserved.
pub fn allocate(complexity: &[f64], total: usize, phi: f64, strategy: Strategy) -> Result<Allocation> {
    let k = complexity.len();
    if k == 0 {
        return Err(Error::config("allocation needs at least one class"));
    }
    if total < k {
        return Err(Error::config(format!(
            "cannot give each of {k} classes a channel out of {total}"
        )));
    }
    if complexity.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("allocation: non-finite complexity score".into()));
    }
    let channels = match strategy {
        Strategy::Uniform => {
            let base = total / k;
            let rem = total % k;
            (0..k).map(|j| base + usize::from(j < rem)).collect()
        }
        Strategy::ComplexityAware => proportional(complexity, total, phi)?,
        Strategy::WorstCase => {
            let negated: Vec<f64> = complexity.iter().map(|v| -v).collect();
            proportional(&negated, total, phi)?
        }
    };
    let alloc = Allocation {
        channels_per_class: channels,
        total,
        strategy,
        phi,
    };
    alloc.validate()?;
    Ok(alloc)
}

fn proportional(scores: &[f64], total: usize, phi: f64) -> Result<Vec<usize>> {
    if !(phi > 0.0) {
        return Err(Error::config(format!("allocation phi must be positive, got {phi}")));
    }
    let k = scores.len();
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let shares: Vec<f64> = scores.iter().map(|s| s - min + phi).collect();
    let denom: f64 = shares.iter().sum();
    let real: Vec<f64> = shares.iter().map(|s| s * total as f64 / denom).collect();
    let mut counts: Vec<usize> = real.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // floors of non-negative reals summing to `total` lose strictly less than k
    let leftover = total.saturating_sub(assigned);
    debug_assert!(leftover < k.max(1) || k == 0);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = real[a] - real[a].floor();
        let fb = real[b] - real[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().cycle().take(leftover) {
        counts[j] += 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let max = *counts.iter().max().expect("non-empty");
        // among the largest holders, give up the least-deserving one
        let donor = (0..k)
            .filter(|&j| counts[j] == max)
            .min_by(|&a, &b| real[a].total_cmp(&real[b]).then(b.cmp(&a)))
            .expect("a maximum exists");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}
