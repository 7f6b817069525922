//! The frozen spiking stage between training blocks.
//!
//! Nothing here is differentiable or trainable. A block's output is
//! standardized to a `thresh`-scaled range, quantized onto the levels an
//! integrate-and-fire neuron can express in `T` steps, and turned into a
//! binary spike train. With `T == L`, `λ == thresh` and a membrane preload
//! of `φ·thresh`, the rate-decoded spike train reproduces the quantized
//! activation exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Guard on the global std in [`regularize`].
pub const REGULARIZE_EPS: f64 = 1e-8;

/// Integrate-and-fire population with subtraction reset. Carries no
/// trainable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikingLayer {
    pub thresh: f64,
    pub horizon: usize,
    /// Initial membrane potential as a fraction of `thresh`.
    pub initial_charge_frac: f64,
}

impl SpikingLayer {
    pub fn new(thresh: f64, horizon: usize) -> Result<Self> {
        let layer = SpikingLayer {
            thresh,
            horizon,
            initial_charge_frac: 0.5,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thresh > 0.0 && self.thresh.is_finite()) {
            return Err(Error::config(format!(
                "spiking threshold must be positive, got {}",
                self.thresh
            )));
        }
        if self.horizon == 0 {
            return Err(Error::config("spiking horizon must be at least one step"));
        }
        if !(0.0..1.0).contains(&self.initial_charge_frac) {
            return Err(Error::config(format!(
                "initial charge fraction must lie in [0, 1), got {}",
                self.initial_charge_frac
            )));
        }
        Ok(())
    }
}

/// Parameters of the quantized clip-floor activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantActParams {
    pub lambda: f64,
    pub levels: usize,
    pub shift_phi: f64,
}

impl QuantActParams {
    /// The setting that lines up with `layer`: `λ = thresh`, `L = T`,
    /// shift equal to the preload fraction.
    pub fn matching(layer: &SpikingLayer) -> Self {
        QuantActParams {
            lambda: layer.thresh,
            levels: layer.horizon,
            shift_phi: layer.initial_charge_frac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "quantization lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.levels == 0 {
            return Err(Error::config("quantization needs at least one level"));
        }
        if !self.shift_phi.is_finite() {
            return Err(Error::config("quantization shift must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Regularized<T = f32> {
    pub output: Tensor<T>,
    /// The input had (near) zero spread and the output was zeroed.
    pub degenerate: bool,
}

/// `thresh · (x − μ) / σ` with global population moments.
pub fn regularize<T: Real>(x: &Tensor<T>, thresh: f64) -> Result<Regularized<T>> {
    if x.len() < 2 {
        return Err(Error::shape(
            "regularize",
            format!("needs at least 2 elements, got {}", x.len()),
        ));
    }
    let n = x.len() as f64;
    let mu = x.data().iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    let var = x
        .data()
        .iter()
        .map(|v| {
            let d = v.to_f64().unwrap() - mu;
            d * d
        })
        .sum::<f64>()
        / n;
    let sigma = var.sqrt();
    if sigma <= REGULARIZE_EPS {
        log::warn!("regularize: input spread {sigma:e} is degenerate, emitting zeros");
        return Ok(Regularized {
            output: Tensor::zeros(x.shape()),
            degenerate: true,
        });
    }
    let scale = thresh / sigma;
    Ok(Regularized {
        output: x.map(|v| T::lit((v.to_f64().unwrap() - mu) * scale)),
        degenerate: false,
    })
}

/// Quantization level index `clip(⌊z·L/λ + φ⌋, 0, L)`.
fn level(z: f64, q: &QuantActParams) -> usize {
    let k = (z * q.levels as f64 / q.lambda + q.shift_phi).floor();
    if k <= 0.0 {
        0
    } else if k >= q.levels as f64 {
        q.levels
    } else {
        k as usize
    }
}

/// `λ · clip(⌊z·L/λ + φ⌋ / L, 0, 1)` elementwise.
pub fn quantized_relu<T: Real>(z: &Tensor<T>, q: &QuantActParams) -> Tensor<T> {
    z.map(|v| T::lit(level(v.to_f64().unwrap(), q) as f64 * q.lambda / q.levels as f64))
}

/// Straight-through surrogate used only when the quantized activation sits
/// in the loss path: unit slope inside `(0, λ)`, zero elsewhere.
pub fn quantized_relu_backward<T: Real>(z: &Tensor<T>, q: &QuantActParams, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let lambda = T::lit(q.lambda);
    z.zip_map(grad_out, |v, g| if v > T::zero() && v < lambda { g } else { T::zero() })
}

#[derive(Clone, Debug)]
pub struct IfOutput<T = f32> {
    /// `T × N × C × H × W`, entries exactly 0 or 1.
    pub spikes: Tensor<T>,
    pub v_initial: Tensor<T>,
    pub v_final: Tensor<T>,
}

/// Integrate-and-fire simulation with subtraction reset.
///
/// `drive` is either a rank-5 `T × …` tensor (one input per step, `T` must
/// equal the layer horizon) or a rank-4 tensor replicated at every step.
pub fn if_forward<T: Real>(drive: &Tensor<T>, layer: &SpikingLayer) -> Result<IfOutput<T>> {
    layer.validate()?;
    let steps = layer.horizon;
    let (frame_shape, per_step): (Vec<usize>, bool) = match drive.ndim() {
        5 => {
            if drive.shape()[0] != steps {
                return Err(Error::shape(
                    "if_forward",
                    format!("drive has {} steps but the layer horizon is {steps}", drive.shape()[0]),
                ));
            }
            (drive.shape()[1..].to_vec(), true)
        }
        4 => (drive.shape().to_vec(), false),
        _ => {
            return Err(Error::shape(
                "if_forward",
                format!("drive must be rank 4 or 5, got {:?}", drive.shape()),
            ))
        }
    };
    let frame: usize = frame_shape.iter().product();
    let thresh = T::lit(layer.thresh);
    let v0 = T::lit(layer.initial_charge_frac * layer.thresh);
    let mut v = vec![v0; frame];
    let mut spikes = vec![T::zero(); steps * frame];
    for t in 0..steps {
        let input = if per_step {
            &drive.data()[t * frame..(t + 1) * frame]
        } else {
            drive.data()
        };
        let out = &mut spikes[t * frame..(t + 1) * frame];
        for ((vm, &d), s) in v.iter_mut().zip(input).zip(out.iter_mut()) {
            *vm = *vm + d;
            if *vm >= thresh {
                *s = T::one();
                *vm = *vm - thresh;
            }
        }
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(&frame_shape);
    Ok(IfOutput {
        spikes: Tensor::from_vec(&shape, spikes)?,
        v_initial: Tensor::full(&frame_shape, v0),
        v_final: Tensor::from_vec(&frame_shape, v)?,
    })
}

/// Residual membrane change `v(T) − v(0)`.
pub fn conversion_error<T: Real>(v_final: &Tensor<T>, v_initial: &Tensor<T>) -> Result<Tensor<T>> {
    v_final.zip_map(v_initial, |a, b| a - b)
}

/// Mean absolute conversion error, the per-layer diagnostic.
pub fn mean_abs_conversion_error<T: Real>(out: &IfOutput<T>) -> Result<f64> {
    let e = conversion_error(&out.v_final, &out.v_initial)?;
    Ok(e.data().iter().map(|v| v.to_f64().unwrap().abs()).sum::<f64>() / e.len().max(1) as f64)
}

/// `(Σ_t spikes) · λ / T`.
pub fn rate_decode<T: Real>(spikes: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let dims = spikes.dims5("rate_decode")?;
    let steps = dims[0];
    let frame = spikes.len() / steps.max(1);
    let mut counts = vec![T::zero(); frame];
    for t in 0..steps {
        for (c, &s) in counts.iter_mut().zip(&spikes.data()[t * frame..(t + 1) * frame]) {
            *c = *c + s;
        }
    }
    let lam = T::lit(lambda);
    let steps_t = T::from_usize_lossy(steps);
    Tensor::from_vec(&dims[1..], counts.into_iter().map(|c| c * lam / steps_t).collect())
}

/// Fraction of entries that are spikes.
pub fn spike_rate<T: Real>(spikes: &Tensor<T>) -> f64 {
    if spikes.is_empty() {
        return 0.0;
    }
    spikes.data().iter().filter(|&&s| s > T::zero()).count() as f64 / spikes.len() as f64
}

/// The full frozen stage: regularize, quantize, replicate over the horizon
/// and spike.
pub fn encode<T: Real>(y: &Tensor<T>, layer: &SpikingLayer, q: &QuantActParams) -> Result<IfOutput<T>> {
    let reg = regularize(y, layer.thresh)?;
    let drive = quantized_relu(&reg.output, q);
    if_forward(&drive, layer)
}
