//! Per-channel standardization with a learnable affine.
//!
//! `Batch` mode reduces an `N×C×H×W` tensor over `(N, H, W)`; `Temporal`
//! mode reduces a `T×N×C×H×W` tensor over `(T, N, H, W)`. Both share one
//! kernel that views the input as `outer × C × inner`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Batch,
    Temporal,
}

impl NormMode {
    fn rank(self) -> usize {
        match self {
            NormMode::Batch => 4,
            NormMode::Temporal => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
    pub mode: NormMode,
}

impl<T: Real> NormParams<T> {
    /// `gamma = gamma0`, `beta = 0`, running stats at `(0, 1)`, momentum 0.1, epsilon 1e-5.
    pub fn new(channels: usize, mode: NormMode, gamma0: T) -> Self {
        NormParams {
            gamma: vec![gamma0; channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            epsilon: T::lit(1e-5),
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::config("normalize: parameter vectors disagree in length"));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::config("normalize: epsilon must be positive"));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::config("normalize: momentum must lie in (0, 1)"));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::config("normalize: running variance must be non-negative"));
        }
        Ok(())
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        for c in 0..self.gamma.len() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * var[c];
        }
    }
}

/// Forward result with everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct NormForward<T = f32> {
    pub out: Tensor<T>,
    /// Standardized input before the affine.
    pub xhat: Tensor<T>,
    /// Statistics used: batch moments in training mode, running ones otherwise.
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub training: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormGrads<T = f32> {
    pub x: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn layout<T: Real>(x: &Tensor<T>, p: &NormParams<T>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != p.mode.rank() {
        return Err(Error::shape(
            "normalize",
            format!("{:?} mode expects a rank-{} tensor, got {:?}", p.mode, p.mode.rank(), s),
        ));
    }
    let axis = s.len() - 3;
    if s[axis] != p.channels() {
        return Err(Error::shape(
            "normalize",
            format!(
                "channel extent {} does not match {} gamma entries",
                s[axis],
                p.channels()
            ),
        ));
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    Ok((outer, s[axis], inner))
}

pub fn normalize_forward<T: Real>(x: &Tensor<T>, p: &NormParams<T>, training: bool) -> Result<NormForward<T>> {
    let (outer, ch, inner) = layout(x, p)?;
    let count = outer * inner;
    let data = x.data();
    let (mean, var) = if training {
        if count == 0 {
            return Err(Error::shape("normalize", "empty reduction"));
        }
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for c in 0..ch {
            let mut s = 0.0f64;
            for o in 0..outer {
                let base = (o * ch + c) * inner;
                s += data[base..base + inner]
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .sum::<f64>();
            }
            let mu = s / count as f64;
            let mut ss = 0.0f64;
            for o in 0..outer {
                let base = (o * ch + c) * inner;
                ss += data[base..base + inner]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64().unwrap() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[c] = T::lit(mu);
            var[c] = T::lit(ss / count as f64);
        }
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for c in 0..ch {
            let inv = T::one() / (var[c] + p.epsilon).sqrt();
            let base = (o * ch + c) * inner;
            for i in base..base + inner {
                let h = (data[i] - mean[c]) * inv;
                xhat[i] = h;
                out[i] = p.gamma[c] * h + p.beta[c];
            }
        }
    }
    Ok(NormForward {
        out: Tensor::from_vec(x.shape(), out)?,
        xhat: Tensor::from_vec(x.shape(), xhat)?,
        mean,
        var,
        training,
    })
}

/// Standardizes `x`; running statistics are left untouched (see
/// [`NormParams::update_running`]).
pub fn normalize<T: Real>(x: &Tensor<T>, p: &NormParams<T>, training: bool) -> Result<Tensor<T>> {
    normalize_forward(x, p, training).map(|f| f.out)
}

/// Training-mode backward pass (batch statistics depend on `x`).
pub fn normalize_backward<T: Real>(x: &Tensor<T>, p: &NormParams<T>, grad_out: &Tensor<T>) -> Result<NormGrads<T>> {
    let fwd = normalize_forward(x, p, true)?;
    normalize_backward_cached(&fwd, p, grad_out)
}

pub fn normalize_backward_cached<T: Real>(
    fwd: &NormForward<T>,
    p: &NormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    if grad_out.shape() != fwd.xhat.shape() {
        return Err(Error::shape(
            "normalize_backward",
            format!("grad_out {:?} vs input {:?}", grad_out.shape(), fwd.xhat.shape()),
        ));
    }
    let (outer, ch, inner) = layout(&fwd.xhat, p)?;
    let count = T::from_usize_lossy(outer * inner);
    let g = grad_out.data();
    let xh = fwd.xhat.data();
    let mut ggamma = vec![T::zero(); ch];
    let mut gbeta = vec![T::zero(); ch];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for i in base..base + inner {
                gbeta[c] = gbeta[c] + g[i];
                ggamma[c] = ggamma[c] + g[i] * xh[i];
            }
        }
    }
    let mut gx = vec![T::zero(); g.len()];
    for c in 0..ch {
        let scale = p.gamma[c] / (fwd.var[c] + p.epsilon).sqrt();
        let (mg, mgx) = if fwd.training {
            (gbeta[c] / count, ggamma[c] / count)
        } else {
            (T::zero(), T::zero())
        };
        for o in 0..outer {
            let base = (o * ch + c) * inner;
            for i in base..base + inner {
                gx[i] = scale * (g[i] - mg - xh[i] * mgx);
            }
        }
    }
    Ok(NormGrads {
        x: Tensor::from_vec(grad_out.shape(), gx)?,
        gamma: ggamma,
        beta: gbeta,
    })
}
