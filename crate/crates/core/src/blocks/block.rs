use serde::{Deserialize, Serialize};

use super::goodness::{goodness, goodness_backward, local_loss, GoodnessDivisor, GoodnessMatrix, LossMode};
use crate::allocation::Allocation;
use crate::error::{Error, Result};
use crate::numerics::{
    conv2d_backward_cached, conv2d_with_raw, normalize_backward_cached, normalize_forward, relu, relu_backward,
    ConvParams, NormForward, NormMode, NormParams,
};
use crate::spiking::{quantized_relu, quantized_relu_backward, QuantActParams, SpikingLayer};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Consumes images; batch normalization.
    Encoding,
    /// Consumes spike trains; temporal normalization over steps and batch.
    Hidden,
}

/// Knobs shared by every block of a network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockOptions {
    pub loss_mode: LossMode,
    pub divisor: GoodnessDivisor,
    /// Put the quantized activation (with a straight-through gradient) in
    /// the loss path instead of plain ReLU.
    pub quant_in_loss: bool,
}

/// Conv + norm + activation + goodness head, followed by a frozen spiking
/// layer that turns the activation into the next block's input.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBlock<T = f32> {
    pub conv: ConvParams<T>,
    pub norm: NormParams<T>,
    pub allocation: Allocation,
    pub kind: BlockKind,
    pub spiking: SpikingLayer,
    pub quant: QuantActParams,
    pub options: BlockOptions,
}

impl<T: Real> TrainingBlock<T> {
    pub fn validate(&self) -> Result<()> {
        self.allocation.validate()?;
        if self.allocation.total != self.conv.c_out() {
            return Err(Error::config(format!(
                "allocation covers {} channels but the block has C_out = {}",
                self.allocation.total,
                self.conv.c_out()
            )));
        }
        if self.norm.channels() != self.conv.c_out() {
            return Err(Error::config("normalization width differs from C_out"));
        }
        let expected = match self.kind {
            BlockKind::Encoding => NormMode::Batch,
            BlockKind::Hidden => NormMode::Temporal,
        };
        if self.norm.mode != expected {
            return Err(Error::config(format!(
                "{:?} blocks use {:?} normalization",
                self.kind, expected
            )));
        }
        self.norm.validate()?;
        self.spiking.validate()?;
        self.quant.validate()
    }

    fn activate(&self, a: &Tensor<T>) -> Tensor<T> {
        if self.options.quant_in_loss {
            quantized_relu(a, &self.quant)
        } else {
            relu(a)
        }
    }

    fn activate_backward(&self, a: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        if self.options.quant_in_loss {
            quantized_relu_backward(a, &self.quant, g)
        } else {
            relu_backward(a, g)
        }
    }
}

/// Everything the backward pass of one block needs.
#[derive(Clone, Debug)]
pub struct BlockCache<T = f32> {
    /// Conv input, flattened to rank 4 (`T·N` images for hidden blocks).
    input: Tensor<T>,
    raw: Tensor<T>,
    norm: NormForward<T>,
    /// Pre-activation: `a` for encoding blocks, `Σ_t a_t` for hidden ones.
    pre: Tensor<T>,
    steps: usize,
}

pub fn encoding_forward<T: Real>(
    x: &Tensor<T>,
    b: &TrainingBlock<T>,
    training: bool,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    x.dims4("encoding_forward")?;
    let (conv, raw) = conv2d_with_raw(x, &b.conv)?;
    let norm = normalize_forward(&conv, &b.norm, training)?;
    let y = b.activate(&norm.out);
    let pre = norm.out.clone();
    Ok((
        y,
        BlockCache {
            input: x.clone(),
            raw,
            norm,
            pre,
            steps: 1,
        },
    ))
}

/// Returns `(y, per_step, cache)` where `per_step` holds the normalized
/// per-step pre-activations `a_t`.
pub fn hidden_forward<T: Real>(
    spikes: &Tensor<T>,
    b: &TrainingBlock<T>,
    training: bool,
) -> Result<(Tensor<T>, Tensor<T>, BlockCache<T>)> {
    let [steps, n, c, h, w] = spikes.dims5("hidden_forward")?;
    let input = spikes.clone().reshape(&[steps * n, c, h, w])?;
    let (conv, raw) = conv2d_with_raw(&input, &b.conv)?;
    let [_, co, ho, wo] = conv.dims4("hidden_forward")?;
    let conv = conv.reshape(&[steps, n, co, ho, wo])?;
    let norm = normalize_forward(&conv, &b.norm, training)?;
    let frame = n * co * ho * wo;
    let mut sum = vec![T::zero(); frame];
    for t in 0..steps {
        for (s, &a) in sum.iter_mut().zip(&norm.out.data()[t * frame..(t + 1) * frame]) {
            *s = *s + a;
        }
    }
    let pre = Tensor::from_vec(&[n, co, ho, wo], sum)?;
    let y = b.activate(&pre);
    let per_step = norm.out.clone();
    Ok((
        y,
        per_step,
        BlockCache {
            input,
            raw,
            norm,
            pre,
            steps,
        },
    ))
}

/// Forward pass for either kind of block.
pub fn block_forward<T: Real>(
    x: &Tensor<T>,
    b: &TrainingBlock<T>,
    training: bool,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    match b.kind {
        BlockKind::Encoding => encoding_forward(x, b, training),
        BlockKind::Hidden => hidden_forward(x, b, training).map(|(y, _, cache)| (y, cache)),
    }
}

/// Gradients of the local loss for every trainable parameter of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T = f32> {
    pub kernels: Tensor<T>,
    pub bias: Vec<T>,
    pub channel_weight: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backpropagates `∂L/∂y` through activation, normalization and conv. The
/// block input is detached, so no input gradient is formed.
pub fn block_backward<T: Real>(
    b: &TrainingBlock<T>,
    cache: &BlockCache<T>,
    grad_y: &Tensor<T>,
) -> Result<BlockGrads<T>> {
    let g_pre = b.activate_backward(&cache.pre, grad_y)?;
    let g_norm_out = if cache.steps == 1 && b.kind == BlockKind::Encoding {
        g_pre
    } else {
        // Every step receives the gradient of the sum.
        let mut rep = Vec::with_capacity(g_pre.len() * cache.steps);
        for _ in 0..cache.steps {
            rep.extend_from_slice(g_pre.data());
        }
        Tensor::from_vec(cache.norm.out.shape(), rep)?
    };
    let ng = normalize_backward_cached(&cache.norm, &b.norm, &g_norm_out)?;
    let g_conv = ng.x.reshape(cache.raw.shape())?;
    let cg = conv2d_backward_cached(&cache.input, &b.conv, &cache.raw, &g_conv, false)?;
    Ok(BlockGrads {
        kernels: cg.kernels,
        bias: cg.bias,
        channel_weight: cg.channel_weight,
        gamma: ng.gamma,
        beta: ng.beta,
    })
}

/// One training-mode evaluation of the block objective.
#[derive(Clone, Debug)]
pub struct BlockEval<T = f32> {
    pub loss: f64,
    pub goodness: GoodnessMatrix,
    pub y: Tensor<T>,
    pub grads: BlockGrads<T>,
    /// Batch statistics used by the normalization layer.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Forward, loss and analytic gradients, without touching the block.
pub fn block_gradients<T: Real>(x: &Tensor<T>, labels: &[usize], b: &TrainingBlock<T>) -> Result<BlockEval<T>> {
    let (y, cache) = block_forward(x, b, true)?;
    let g = goodness(&y, &b.allocation, b.options.divisor)?;
    let out = local_loss(&g, labels, b.options.loss_mode)?;
    if !out.loss.is_finite() {
        return Err(Error::Numeric(format!("local loss is {}", out.loss)));
    }
    let grad_y = goodness_backward(&y, &b.allocation, b.options.divisor, &g, &out.grad)?;
    let grads = block_backward(b, &cache, &grad_y)?;
    Ok(BlockEval {
        loss: out.loss,
        goodness: g,
        y,
        grads,
        batch_mean: cache.norm.mean,
        batch_var: cache.norm.var,
    })
}

/// Training-mode local loss only (for finite-difference checks).
pub fn block_loss<T: Real>(x: &Tensor<T>, labels: &[usize], b: &TrainingBlock<T>) -> Result<f64> {
    let (y, _) = block_forward(x, b, true)?;
    let g = goodness(&y, &b.allocation, b.options.divisor)?;
    Ok(local_loss(&g, labels, b.options.loss_mode)?.loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    /// Fraction of the batch whose goodness argmax is the label.
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T = f32> {
    pub metrics: StepMetrics,
    pub goodness: GoodnessMatrix,
    /// Activation computed before the update; feeds the spiking layer.
    pub y: Tensor<T>,
}

fn sgd<T: Real>(params: &mut [T], grads: &[T], lr: T) {
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * g;
    }
}

/// Forward, local loss, analytic backward and a plain SGD step on kernels,
/// bias, channel weights, gamma and beta. Running normalization statistics
/// absorb the batch moments.
pub fn block_train_step<T: Real>(
    x: &Tensor<T>,
    labels: &[usize],
    b: &mut TrainingBlock<T>,
    lr: f64,
) -> Result<StepOutput<T>> {
    let eval = block_gradients(x, labels, b)?;
    let g = &eval.grads;
    for (name, ok) in [
        ("kernel", g.kernels.is_finite()),
        ("bias", g.bias.iter().all(|v| v.is_finite())),
        ("channel weight", g.channel_weight.iter().all(|v| v.is_finite())),
        ("gamma", g.gamma.iter().all(|v| v.is_finite())),
        ("beta", g.beta.iter().all(|v| v.is_finite())),
    ] {
        if !ok {
            return Err(Error::Numeric(format!("non-finite {name} gradient")));
        }
    }
    if lr != 0.0 {
        let lr = T::lit(lr);
        sgd(b.conv.kernels.data_mut(), g.kernels.data(), lr);
        sgd(&mut b.conv.bias, &g.bias, lr);
        sgd(&mut b.conv.channel_weight, &g.channel_weight, lr);
        sgd(&mut b.norm.gamma, &g.gamma, lr);
        sgd(&mut b.norm.beta, &g.beta, lr);
    }
    b.norm.update_running(&eval.batch_mean, &eval.batch_var);

    let predicted = eval.goodness.argmax();
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(StepOutput {
        metrics: StepMetrics {
            loss: eval.loss,
            accuracy: correct as f64 / labels.len().max(1) as f64,
        },
        goodness: eval.goodness,
        y: eval.y,
    })
}
