use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{block_forward, block_train_step, BlockKind, BlockOptions, TrainingBlock};
use super::goodness::{argmax, goodness, GoodnessMatrix};
use crate::allocation::Allocation;
use crate::checkpoint::{Checkpoint, CheckpointError, NamedArray};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{ConvParams, NormMode, NormParams};
use crate::spiking::{encode, mean_abs_conversion_error, spike_rate, QuantActParams, SpikingLayer};
use crate::tensor::{Real, Tensor};

/// Shape of a network: one encoding block followed by hidden blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub classes: usize,
    /// Output channels per block.
    pub channels: Vec<usize>,
    /// One stride per block, optionally followed by a trailing `1` for the
    /// goodness head.
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub horizon: usize,
    pub thresh: f64,
    /// Quantization levels; normally equal to `horizon`.
    pub levels: usize,
    /// Quantization shift, also the membrane preload as a fraction of `thresh`.
    pub shift_phi: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let nb = self.channels.len();
        if nb == 0 {
            return Err(Error::config("architecture needs at least one block"));
        }
        if self.in_channels == 0 || self.classes == 0 || self.kernel == 0 || self.horizon == 0 || self.levels == 0 {
            return Err(Error::config(
                "channel, class, kernel, horizon and level counts must be positive",
            ));
        }
        if let Some(i) = self.channels.iter().position(|&c| c < self.classes) {
            return Err(Error::config(format!(
                "block {i} has {} channels, fewer than the {} classes",
                self.channels[i], self.classes
            )));
        }
        let ok = self.strides.len() == nb || (self.strides.len() == nb + 1 && self.strides[nb] == 1);
        if !ok {
            return Err(Error::config(format!(
                "strides {:?} must list one entry per block ({nb}), optionally plus a trailing 1",
                self.strides
            )));
        }
        if self.strides.contains(&0) {
            return Err(Error::config("strides must be positive"));
        }
        if !(self.thresh > 0.0 && self.thresh.is_finite()) {
            return Err(Error::config("thresh must be positive"));
        }
        if !(0.0..1.0).contains(&self.shift_phi) {
            return Err(Error::config("shift_phi must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn block_stride(&self, i: usize) -> usize {
        self.strides[i]
    }

    pub fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.channels[i - 1]
        }
    }

    pub fn spiking_layer(&self) -> SpikingLayer {
        SpikingLayer {
            thresh: self.thresh,
            horizon: self.horizon,
            initial_charge_frac: self.shift_phi,
        }
    }

    pub fn quant(&self) -> QuantActParams {
        QuantActParams {
            lambda: self.thresh,
            levels: self.levels,
            shift_phi: self.shift_phi,
        }
    }

    /// Output `(H, W)` of every block for an `H × W` input.
    pub fn spatial_extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut cur = (h, w);
        let mut out = Vec::with_capacity(self.blocks());
        for i in 0..self.blocks() {
            let s = self.block_stride(i);
            let (ph, pw) = (cur.0 + 2 * self.padding, cur.1 + 2 * self.padding);
            if ph < self.kernel || pw < self.kernel {
                return Err(Error::config(format!(
                    "block {i}: {}×{} input is smaller than the kernel",
                    cur.0, cur.1
                )));
            }
            cur = ((ph - self.kernel) / s + 1, (pw - self.kernel) / s + 1);
            out.push(cur);
        }
        Ok(out)
    }
}

/// Serialized alongside the parameters in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescriptor {
    pub architecture: Architecture,
    pub allocations: Vec<Allocation>,
    pub options: BlockOptions,
    pub aggregation_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    pub arch: Architecture,
    pub blocks: Vec<TrainingBlock<T>>,
    /// Weight of each block's `ln G` in [`predict`].
    pub aggregation_weights: Vec<f64>,
}

impl<T: Real> Network<T> {
    /// He-initialized network; all randomness comes from `seed`.
    pub fn new(arch: Architecture, allocations: Vec<Allocation>, options: BlockOptions, seed: u64) -> Result<Self> {
        arch.validate()?;
        if allocations.len() != arch.blocks() {
            return Err(Error::config(format!(
                "{} allocations for {} blocks",
                allocations.len(),
                arch.blocks()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(arch.blocks());
        for (i, allocation) in allocations.into_iter().enumerate() {
            if allocation.classes() != arch.classes {
                return Err(Error::config(format!(
                    "block {i} allocation has {} classes, network has {}",
                    allocation.classes(),
                    arch.classes
                )));
            }
            let kind = if i == 0 { BlockKind::Encoding } else { BlockKind::Hidden };
            let mode = if i == 0 { NormMode::Batch } else { NormMode::Temporal };
            let conv = ConvParams::he_normal(
                arch.block_in_channels(i),
                arch.channels[i],
                arch.kernel,
                arch.block_stride(i),
                arch.padding,
                &mut rng,
            )?;
            blocks.push(TrainingBlock {
                conv,
                norm: NormParams::new(arch.channels[i], mode, T::one()),
                allocation,
                kind,
                spiking: arch.spiking_layer(),
                quant: arch.quant(),
                options,
            });
        }
        let net = Network {
            aggregation_weights: vec![1.0; blocks.len()],
            arch,
            blocks,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.blocks.len() != self.arch.blocks() || self.aggregation_weights.len() != self.blocks.len() {
            return Err(Error::config(
                "block list, architecture and aggregation weights disagree",
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.conv.c_in() != self.arch.block_in_channels(i) {
                return Err(Error::config(format!("block {i} input channels do not chain")));
            }
            if b.allocation.classes() != self.arch.classes || b.spiking.horizon != self.arch.horizon {
                return Err(Error::config(format!("block {i} disagrees on classes or horizon")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn horizon(&self) -> usize {
        self.arch.horizon
    }

    pub fn descriptor(&self) -> NetworkDescriptor {
        NetworkDescriptor {
            architecture: self.arch.clone(),
            allocations: self.blocks.iter().map(|b| b.allocation.clone()).collect(),
            options: self.blocks.first().map(|b| b.options).unwrap_or_default(),
            aggregation_weights: self.aggregation_weights.clone(),
        }
    }
}

/// Per-stage results of a full forward pass.
#[derive(Clone, Debug)]
pub struct NetworkOutput<T = f32> {
    pub goodness: Vec<GoodnessMatrix>,
    /// Spike train emitted after each block (`T × N × C × H × W`).
    pub spikes: Vec<Tensor<T>>,
    pub spike_rates: Vec<f64>,
    pub conversion_error: Vec<f64>,
}

/// Image → encoding block → spikes → hidden block → spikes → …
pub fn network_forward<T: Real>(x: &Tensor<T>, net: &Network<T>, training: bool) -> Result<NetworkOutput<T>> {
    let mut out = NetworkOutput {
        goodness: Vec::new(),
        spikes: Vec::new(),
        spike_rates: Vec::new(),
        conversion_error: Vec::new(),
    };
    let mut input = x.clone();
    for b in &net.blocks {
        let (y, _) = block_forward(&input, b, training)?;
        out.goodness.push(goodness(&y, &b.allocation, b.options.divisor)?);
        let fired = encode(&y, &b.spiking, &b.quant)?;
        out.spike_rates.push(spike_rate(&fired.spikes));
        out.conversion_error.push(mean_abs_conversion_error(&fired)?);
        input = fired.spikes.clone();
        out.spikes.push(fired.spikes);
    }
    Ok(out)
}

/// Inference batch size; the spiking stage standardizes over a whole batch.
pub const INFERENCE_BATCH: usize = 128;

/// Per-sample, per-class scores `Σ_b w_b · ln G_b`.
pub fn class_scores<T: Real>(x: &Tensor<T>, net: &Network<T>) -> Result<Vec<Vec<f64>>> {
    let [n, c, h, w] = x.dims4("predict")?;
    let per = c * h * w;
    let k = net.classes();
    let mut scores = Vec::with_capacity(n);
    for start in (0..n).step_by(INFERENCE_BATCH) {
        let end = (start + INFERENCE_BATCH).min(n);
        let chunk = Tensor::from_vec(&[end - start, c, h, w], x.data()[start * per..end * per].to_vec())?;
        let fwd = forward_goodness(&chunk, net)?;
        for i in 0..end - start {
            let mut row = vec![0.0; k];
            for (g, &wb) in fwd.iter().zip(&net.aggregation_weights) {
                if wb != 0.0 {
                    for (r, v) in row.iter_mut().zip(g.row(i)) {
                        *r += wb * v.ln();
                    }
                }
            }
            scores.push(row);
        }
    }
    Ok(scores)
}

fn forward_goodness<T: Real>(x: &Tensor<T>, net: &Network<T>) -> Result<Vec<GoodnessMatrix>> {
    let mut input = x.clone();
    let mut gs = Vec::with_capacity(net.blocks.len());
    for (i, b) in net.blocks.iter().enumerate() {
        let (y, _) = block_forward(&input, b, false)?;
        gs.push(goodness(&y, &b.allocation, b.options.divisor)?);
        if i + 1 < net.blocks.len() {
            input = encode(&y, &b.spiking, &b.quant)?.spikes;
        }
    }
    Ok(gs)
}

/// Class ids by aggregated log-goodness; ties go to the lowest index.
pub fn predict<T: Real>(x: &Tensor<T>, net: &Network<T>) -> Result<Vec<usize>> {
    Ok(class_scores(x, net)?.iter().map(|r| argmax(r)).collect())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Evaluates `net` on a dataset in inference mode.
pub fn evaluate<T: Real>(net: &Network<T>, d: &Dataset) -> Result<(f64, Vec<usize>)> {
    let pred = predict(&d.images.cast::<T>(), net)?;
    Ok((accuracy(&pred, &d.labels), pred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 3,
            batch_size: 128,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean local loss per block.
    pub block_loss: Vec<f64>,
    /// Training accuracy of each block's own goodness argmax.
    pub block_accuracy: Vec<f64>,
    /// Training accuracy of the aggregated prediction.
    pub ensemble_accuracy: f64,
    /// Mean firing rate of each spiking layer.
    pub spike_rate: Vec<f64>,
    pub conversion_error: Vec<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
    /// Wall-clock seconds per epoch, kept apart so the metrics themselves
    /// are reproducible.
    pub seconds: Vec<f64>,
}

/// Trains every block layer-locally in one pass per batch: each block
/// steps on its detached input, then its pre-update activation is spiked
/// to form the next block's input. `on_epoch` sees each finished epoch.
pub fn fit<T: Real>(
    train: &Dataset,
    net: &mut Network<T>,
    cfg: &FitConfig,
    eval: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochMetrics, f64),
) -> Result<History> {
    net.validate()?;
    if train.meta.classes > net.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, network has {}",
            train.meta.classes,
            net.classes()
        )));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("batch size must be positive and lr non-negative"));
    }
    let nb = net.blocks.len();
    let k = net.classes();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss = vec![0.0; nb];
        let mut correct = vec![0.0; nb];
        let mut rates = vec![0.0; nb];
        let mut conv_err = vec![0.0; nb];
        let mut ensemble_correct = 0usize;
        let mut seen = 0usize;
        for batch in batches(train, cfg.batch_size, true, cfg.seed, epoch as u64) {
            let n = batch.labels.len();
            let mut input = batch.images.cast::<T>();
            let mut scores = vec![0.0; n * k];
            for (i, b) in net.blocks.iter_mut().enumerate() {
                let step = block_train_step(&input, &batch.labels, b, cfg.lr)?;
                loss[i] += step.metrics.loss * n as f64;
                correct[i] += step.metrics.accuracy * n as f64;
                let w = net.aggregation_weights[i];
                if w != 0.0 {
                    for (s, g) in scores.iter_mut().zip(&step.goodness.values) {
                        *s += w * g.ln();
                    }
                }
                let fired = encode(&step.y, &b.spiking, &b.quant)?;
                rates[i] += spike_rate(&fired.spikes) * n as f64;
                conv_err[i] += mean_abs_conversion_error(&fired)? * n as f64;
                input = fired.spikes;
            }
            ensemble_correct += (0..n)
                .filter(|&s| argmax(&scores[s * k..(s + 1) * k]) == batch.labels[s])
                .count();
            seen += n;
        }
        let denom = seen.max(1) as f64;
        let test_accuracy = match eval {
            Some(d) => Some(evaluate(net, d)?.0),
            None => None,
        };
        let metrics = EpochMetrics {
            epoch,
            block_loss: loss.iter().map(|v| v / denom).collect(),
            block_accuracy: correct.iter().map(|v| v / denom).collect(),
            ensemble_accuracy: ensemble_correct as f64 / denom,
            spike_rate: rates.iter().map(|v| v / denom).collect(),
            conversion_error: conv_err.iter().map(|v| v / denom).collect(),
            test_accuracy,
        };
        let secs = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: loss {:?} ensemble {:.4} test {:?} ({secs:.1}s)",
            metrics.block_loss,
            metrics.ensemble_accuracy,
            metrics.test_accuracy
        );
        on_epoch(&metrics, secs);
        history.epochs.push(metrics);
        history.seconds.push(secs);
    }
    Ok(history)
}

fn array<T: Real>(name: String, shape: &[usize], data: &[T]) -> NamedArray {
    NamedArray {
        name,
        shape: shape.to_vec(),
        data: data.iter().map(|v| v.to_f32().unwrap()).collect(),
    }
}

fn restore<T: Real>(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Vec<T>, CheckpointError> {
    let a = ck.get(name)?;
    if a.shape != shape {
        return Err(CheckpointError::Mismatch(format!(
            "{name} has extents {:?}, expected {shape:?}",
            a.shape
        )));
    }
    Ok(a.data.iter().map(|&v| T::lit(v as f64)).collect())
}

impl<T: Real> Network<T> {
    /// Parameters and running statistics as `block{i}.…` arrays. Arrays
    /// with other prefixes are left for callers to add and are ignored by
    /// [`Network::from_checkpoint`].
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let descriptor = serde_json::to_string(&self.descriptor())
            .map_err(|e| CheckpointError::Malformed(format!("descriptor: {e}")))?;
        let mut arrays = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let c = b.conv.c_out();
            let p = format!("block{i}");
            arrays.push(array(
                format!("{p}.conv.kernels"),
                b.conv.kernels.shape(),
                b.conv.kernels.data(),
            ));
            arrays.push(array(format!("{p}.conv.bias"), &[c], &b.conv.bias));
            arrays.push(array(format!("{p}.conv.channel_weight"), &[c], &b.conv.channel_weight));
            arrays.push(array(format!("{p}.norm.gamma"), &[c], &b.norm.gamma));
            arrays.push(array(format!("{p}.norm.beta"), &[c], &b.norm.beta));
            arrays.push(array(format!("{p}.norm.running_mean"), &[c], &b.norm.running_mean));
            arrays.push(array(format!("{p}.norm.running_var"), &[c], &b.norm.running_var));
        }
        Ok(Checkpoint { descriptor, arrays })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let desc: NetworkDescriptor =
            serde_json::from_str(&ck.descriptor).map_err(|e| CheckpointError::Malformed(format!("descriptor: {e}")))?;
        let mut net = Network::<T>::new(desc.architecture, desc.allocations, desc.options, 0)?;
        if desc.aggregation_weights.len() != net.blocks.len() {
            return Err(CheckpointError::Mismatch("aggregation weight count".into()).into());
        }
        net.aggregation_weights = desc.aggregation_weights;
        for (i, b) in net.blocks.iter_mut().enumerate() {
            let c = b.conv.c_out();
            let p = format!("block{i}");
            let kshape = b.conv.kernels.shape().to_vec();
            b.conv.kernels = Tensor::from_vec(&kshape, restore(ck, &format!("{p}.conv.kernels"), &kshape)?)?;
            b.conv.bias = restore(ck, &format!("{p}.conv.bias"), &[c])?;
            b.conv.channel_weight = restore(ck, &format!("{p}.conv.channel_weight"), &[c])?;
            b.norm.gamma = restore(ck, &format!("{p}.norm.gamma"), &[c])?;
            b.norm.beta = restore(ck, &format!("{p}.norm.beta"), &[c])?;
            b.norm.running_mean = restore(ck, &format!("{p}.norm.running_mean"), &[c])?;
            b.norm.running_var = restore(ck, &format!("{p}.norm.running_var"), &[c])?;
        }
        let stored = ck.arrays.iter().filter(|a| a.name.starts_with("block")).count();
        if stored != 7 * net.blocks.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{stored} block arrays stored, {} expected",
                7 * net.blocks.len()
            ))
            .into());
        }
        net.validate()?;
        Ok(net)
    }
}
