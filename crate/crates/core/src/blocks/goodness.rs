use serde::{Deserialize, Serialize};

use crate::allocation::Allocation;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Floor applied to every goodness value so `ln G` stays finite.
pub const GOODNESS_EPS: f64 = 1e-12;

/// What a time axis contributes to the goodness denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoodnessDivisor {
    /// Divide by `S_j · T · H · W`: a true mean over the class's slab.
    #[default]
    MeanWithT,
    /// Divide by `S_j · H · W` although the sum runs over all steps.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy of `softmax(ln G)` averaged over the batch.
    #[default]
    Softmax,
    /// `−Σ_n ln G[n, y_n]` on the raw (floored) goodness.
    Literal,
}

/// Per-sample, per-class goodness (`N × K`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct GoodnessMatrix {
    pub samples: usize,
    pub classes: usize,
    pub values: Vec<f64>,
    /// Entries that were raised to the floor; they pass no gradient.
    floored: Vec<bool>,
}

impl GoodnessMatrix {
    pub fn from_values(samples: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != samples * classes {
            return Err(Error::shape(
                "goodness",
                format!("{} values for a {samples}×{classes} matrix", values.len()),
            ));
        }
        let floored = values.iter().map(|&v| !(v >= GOODNESS_EPS)).collect();
        let values = values
            .into_iter()
            .map(|v| if v >= GOODNESS_EPS { v } else { GOODNESS_EPS })
            .collect();
        Ok(GoodnessMatrix {
            samples,
            classes,
            values,
            floored,
        })
    }

    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.values[n * self.classes + j]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.classes..(n + 1) * self.classes]
    }

    /// Per-sample argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.samples).map(|n| argmax(self.row(n))).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `(steps, n, channels, hw)` of a rank-4 `N×C×H×W` or rank-5 `T×N×C×H×W` tensor.
fn layout<T: Real>(y: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *y.shape() {
        [n, c, h, w] => Ok((1, n, c, h * w)),
        [t, n, c, h, w] => Ok((t, n, c, h * w)),
        _ => Err(Error::shape(
            "goodness",
            format!("expected rank 4 or 5, got {:?}", y.shape()),
        )),
    }
}

fn divisor(steps: usize, width: usize, hw: usize, mode: GoodnessDivisor) -> f64 {
    let t = match mode {
        GoodnessDivisor::MeanWithT => steps,
        GoodnessDivisor::Literal => 1,
    };
    (width * t * hw) as f64
}

fn check_alloc(alloc: &Allocation, channels: usize) -> Result<()> {
    alloc.validate()?;
    if alloc.total != channels {
        return Err(Error::shape(
            "goodness",
            format!("allocation covers {} channels, activation has {channels}", alloc.total),
        ));
    }
    Ok(())
}

/// Mean of `y²` over each class's channel slab (and over steps and space).
pub fn goodness<T: Real>(y: &Tensor<T>, alloc: &Allocation, mode: GoodnessDivisor) -> Result<GoodnessMatrix> {
    let (steps, n, c, hw) = layout(y)?;
    check_alloc(alloc, c)?;
    let k = alloc.classes();
    let ranges = alloc.ranges();
    let data = y.data();
    let mut values = vec![0.0f64; n * k];
    for t in 0..steps {
        for i in 0..n {
            let base = (t * n + i) * c * hw;
            for (j, r) in ranges.iter().enumerate() {
                let slab = &data[base + r.start * hw..base + r.end * hw];
                values[i * k + j] += slab
                    .iter()
                    .map(|&v| {
                        let v = v.to_f64().unwrap();
                        v * v
                    })
                    .sum::<f64>();
            }
        }
    }
    for i in 0..n {
        for (j, r) in ranges.iter().enumerate() {
            values[i * k + j] /= divisor(steps, r.len(), hw, mode);
        }
    }
    GoodnessMatrix::from_values(n, k, values)
}

/// `∂L/∂y` given `∂L/∂G`. Floored entries contribute nothing.
pub fn goodness_backward<T: Real>(
    y: &Tensor<T>,
    alloc: &Allocation,
    mode: GoodnessDivisor,
    g: &GoodnessMatrix,
    grad_g: &[f64],
) -> Result<Tensor<T>> {
    let (steps, n, c, hw) = layout(y)?;
    check_alloc(alloc, c)?;
    let k = alloc.classes();
    if g.samples != n || g.classes != k || grad_g.len() != n * k {
        return Err(Error::shape(
            "goodness_backward",
            "goodness gradient does not match the activation",
        ));
    }
    let ranges = alloc.ranges();
    let mut out = vec![T::zero(); y.len()];
    for t in 0..steps {
        for i in 0..n {
            let base = (t * n + i) * c * hw;
            for (j, r) in ranges.iter().enumerate() {
                if g.floored[i * k + j] {
                    continue;
                }
                let scale = T::lit(2.0 * grad_g[i * k + j] / divisor(steps, r.len(), hw, mode));
                let span = base + r.start * hw..base + r.end * hw;
                for (o, &v) in out[span.clone()].iter_mut().zip(&y.data()[span]) {
                    *o = scale * v;
                }
            }
        }
    }
    Tensor::from_vec(y.shape(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `∂loss/∂G`, `N × K` row-major.
    pub grad: Vec<f64>,
}

pub fn local_loss(g: &GoodnessMatrix, labels: &[usize], mode: LossMode) -> Result<LossOutput> {
    let (n, k) = (g.samples, g.classes);
    if labels.len() != n {
        return Err(Error::shape(
            "local_loss",
            format!("{} labels for {n} samples", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    if n == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad: Vec::new(),
        });
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    match mode {
        LossMode::Softmax => {
            let inv_n = 1.0 / n as f64;
            for (i, &y) in labels.iter().enumerate() {
                let row = g.row(i);
                let logits: Vec<f64> = row.iter().map(|v| v.ln()).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                let log_z = max + z.ln();
                loss -= (logits[y] - log_z) * inv_n;
                for j in 0..k {
                    let p = (logits[j] - log_z).exp();
                    let d = p - if j == y { 1.0 } else { 0.0 };
                    grad[i * k + j] = d * inv_n / row[j];
                }
            }
        }
        LossMode::Literal => {
            for (i, &y) in labels.iter().enumerate() {
                let gy = g.get(i, y);
                loss -= gy.ln();
                grad[i * k + y] = -1.0 / gy;
            }
        }
    }
    Ok(LossOutput { loss, grad })
}
