//! Shared builders and the finite-difference harness for block gradients.
#![allow(dead_code)]

use ffsnn::allocation::{allocate, Allocation, Strategy};
use ffsnn::blocks::{
    block_gradients, block_loss, goodness, goodness_backward, local_loss, BlockGrads, BlockKind, BlockOptions,
    GoodnessDivisor, GoodnessMatrix, LossMode, TrainingBlock,
};
use ffsnn::gradcheck::{central_difference, relative_error};
use ffsnn::numerics::{
    conv2d, conv2d_backward, normalize, normalize_backward, relu, relu_backward, ConvParams, NormMode, NormParams,
};
use ffsnn::spiking::{QuantActParams, SpikingLayer};
use ffsnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rand_spikes(shape: &[usize], rng: &mut ChaCha8Rng, p: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap()
}

pub fn uniform_alloc(k: usize, c: usize) -> Allocation {
    allocate(&vec![0.0; k], c, 2.0, Strategy::Uniform).unwrap()
}

#[allow(clippy::too_many_arguments)]
pub fn random_block(
    kind: BlockKind,
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    classes: usize,
    options: BlockOptions,
) -> TrainingBlock<f64> {
    let mut conv = ConvParams::<f64>::he_normal(c_in, c_out, k, stride, k / 2, rng).unwrap();
    for b in conv.bias.iter_mut() {
        *b = rng.random_range(-0.3..0.3);
    }
    for w in conv.channel_weight.iter_mut() {
        *w = rng.random_range(0.6..1.4);
    }
    let mode = match kind {
        BlockKind::Encoding => NormMode::Batch,
        BlockKind::Hidden => NormMode::Temporal,
    };
    let mut norm = NormParams::<f64>::new(c_out, mode, 1.0);
    for g in norm.gamma.iter_mut() {
        *g = rng.random_range(0.5..1.5);
    }
    for b in norm.beta.iter_mut() {
        *b = rng.random_range(-0.2..0.4);
    }
    let spiking = SpikingLayer::new(1.0, 2).unwrap();
    TrainingBlock {
        conv,
        norm,
        allocation: uniform_alloc(classes, c_out),
        kind,
        spiking,
        quant: QuantActParams::matching(&spiking),
        options,
    }
}

/// Trainable parameters in a fixed order: kernels, bias, channel weights,
/// gamma, beta.
pub fn params(b: &TrainingBlock<f64>) -> Vec<f64> {
    let mut v = b.conv.kernels.data().to_vec();
    v.extend(&b.conv.bias);
    v.extend(&b.conv.channel_weight);
    v.extend(&b.norm.gamma);
    v.extend(&b.norm.beta);
    v
}

pub fn set_params(b: &mut TrainingBlock<f64>, v: &[f64]) {
    let nk = b.conv.kernels.len();
    let c = b.conv.c_out();
    b.conv.kernels.data_mut().copy_from_slice(&v[..nk]);
    let mut at = nk;
    for dst in [
        &mut b.conv.bias,
        &mut b.conv.channel_weight,
        &mut b.norm.gamma,
        &mut b.norm.beta,
    ] {
        dst.copy_from_slice(&v[at..at + c]);
        at += c;
    }
}

pub fn flat_grads(g: &BlockGrads<f64>) -> Vec<f64> {
    let mut v = g.kernels.data().to_vec();
    v.extend(&g.bias);
    v.extend(&g.channel_weight);
    v.extend(&g.gamma);
    v.extend(&g.beta);
    v
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Relative errors of each primitive's backward pass for one seed.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut errs = Vec::new();

    // conv2d: L = <R, conv(x)>.
    let x = rand_tensor(&[2, 2, 5, 5], &mut r, -1.0, 1.0);
    let mut p = ConvParams::<f64>::he_normal(2, 3, 3, 1 + (seed as usize % 2), 1, &mut r).unwrap();
    for w in p.channel_weight.iter_mut() {
        *w = r.random_range(0.5..1.5);
    }
    let out = conv2d(&x, &p).unwrap();
    let up = rand_tensor(out.shape(), &mut r, -1.0, 1.0);
    let g = conv2d_backward(&x, &p, &up).unwrap();
    let mut xv = x.data().to_vec();
    let fd_x = central_difference(&mut xv, STEP, |v| {
        dot(
            &up,
            &conv2d(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &p).unwrap(),
        )
    });
    errs.push(("conv2d input", relative_error(g.x.as_ref().unwrap().data(), &fd_x)));
    let mut kv = p.kernels.data().to_vec();
    let fd_k = central_difference(&mut kv, STEP, |v| {
        let mut q = p.clone();
        q.kernels.data_mut().copy_from_slice(v);
        dot(&up, &conv2d(&x, &q).unwrap())
    });
    errs.push(("conv2d kernels", relative_error(g.kernels.data(), &fd_k)));
    let mut wv = p.channel_weight.clone();
    let fd_w = central_difference(&mut wv, STEP, |v| {
        let mut q = p.clone();
        q.channel_weight.copy_from_slice(v);
        dot(&up, &conv2d(&x, &q).unwrap())
    });
    errs.push(("conv2d channel weight", relative_error(&g.channel_weight, &fd_w)));
    let mut bv = p.bias.clone();
    let fd_b = central_difference(&mut bv, STEP, |v| {
        let mut q = p.clone();
        q.bias.copy_from_slice(v);
        dot(&up, &conv2d(&x, &q).unwrap())
    });
    errs.push(("conv2d bias", relative_error(&g.bias, &fd_b)));

    // Normalization in both layouts: L = <R, norm(x)>.
    for (name, shape, mode) in [
        ("batch norm", vec![3, 2, 3, 3], NormMode::Batch),
        ("temporal norm", vec![2, 3, 2, 3, 3], NormMode::Temporal),
    ] {
        let x = rand_tensor(&shape, &mut r, -2.0, 2.0);
        let mut np = NormParams::<f64>::new(2, mode, 1.0);
        np.gamma = vec![r.random_range(0.5..1.5), r.random_range(0.5..1.5)];
        np.beta = vec![r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
        let up = rand_tensor(&shape, &mut r, -1.0, 1.0);
        let g = normalize_backward(&x, &np, &up).unwrap();
        let mut xv = x.data().to_vec();
        let fd = central_difference(&mut xv, STEP, |v| {
            dot(
                &up,
                &normalize(&Tensor::from_vec(&shape, v.to_vec()).unwrap(), &np, true).unwrap(),
            )
        });
        errs.push((name, relative_error(g.x.data(), &fd)));
        let mut gv = np.gamma.clone();
        let fd_g = central_difference(&mut gv, STEP, |v| {
            let mut q = np.clone();
            q.gamma.copy_from_slice(v);
            dot(&up, &normalize(&x, &q, true).unwrap())
        });
        errs.push((name, relative_error(&g.gamma, &fd_g)));
        let mut bv = np.beta.clone();
        let fd_b = central_difference(&mut bv, STEP, |v| {
            let mut q = np.clone();
            q.beta.copy_from_slice(v);
            dot(&up, &normalize(&x, &q, true).unwrap())
        });
        errs.push((name, relative_error(&g.beta, &fd_b)));
    }

    // ReLU away from the kink.
    let x = rand_tensor(&[20], &mut r, 0.05, 1.0).map(|v| if v > 0.5 { v } else { -v });
    let up = rand_tensor(&[20], &mut r, -1.0, 1.0);
    let g = relu_backward(&x, &up).unwrap();
    let mut xv = x.data().to_vec();
    let fd = central_difference(&mut xv, STEP, |v| {
        dot(&up, &relu(&Tensor::from_vec(&[20], v.to_vec()).unwrap()))
    });
    errs.push(("relu", relative_error(g.data(), &fd)));

    // Goodness: L = Σ R ⊙ G, in both ranks and divisor modes.
    for (shape, mode) in [
        (vec![2, 4, 2, 2], GoodnessDivisor::MeanWithT),
        (vec![3, 2, 4, 2, 2], GoodnessDivisor::MeanWithT),
        (vec![3, 2, 4, 2, 2], GoodnessDivisor::Literal),
    ] {
        let y = rand_tensor(&shape, &mut r, -1.0, 1.0);
        let alloc = allocate(&[0.3, -0.3], 4, 2.0, Strategy::ComplexityAware).unwrap();
        let gm = goodness(&y, &alloc, mode).unwrap();
        let up: Vec<f64> = (0..gm.values.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let gy = goodness_backward(&y, &alloc, mode, &gm, &up).unwrap();
        let mut yv = y.data().to_vec();
        let fd = central_difference(&mut yv, STEP, |v| {
            let g = goodness(&Tensor::from_vec(&shape, v.to_vec()).unwrap(), &alloc, mode).unwrap();
            g.values.iter().zip(&up).map(|(a, b)| a * b).sum()
        });
        errs.push(("goodness", relative_error(gy.data(), &fd)));
    }

    // Local loss in both modes.
    let labels = vec![0, 2, 1, 2];
    for mode in [LossMode::Softmax, LossMode::Literal] {
        let vals: Vec<f64> = (0..12).map(|_| r.random_range(0.2..3.0)).collect();
        let gm = GoodnessMatrix::from_values(4, 3, vals.clone()).unwrap();
        let out = local_loss(&gm, &labels, mode).unwrap();
        let mut gv = vals;
        let fd = central_difference(&mut gv, STEP, |v| {
            local_loss(&GoodnessMatrix::from_values(4, 3, v.to_vec()).unwrap(), &labels, mode)
                .unwrap()
                .loss
        });
        errs.push(("local loss", relative_error(&out.grad, &fd)));
    }
    errs
}

/// Relative error of the full analytic block gradient against finite
/// differences of the block loss, for an encoding and a hidden block.
pub fn end_to_end_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let classes = 3;
    let loss_mode = if seed.is_multiple_of(2) {
        LossMode::Softmax
    } else {
        LossMode::Literal
    };
    let options = BlockOptions {
        loss_mode,
        ..Default::default()
    };
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % classes).collect();
    let mut out = Vec::new();

    let x = rand_tensor(&[4, 2, 5, 5], &mut r, -1.0, 1.0);
    let enc = random_block(BlockKind::Encoding, &mut r, 2, 6, 3, 1, classes, options);
    out.push(("encoding block", block_error(&x, &labels, enc)));

    let spikes = rand_spikes(&[2, 4, 3, 4, 4], &mut r, 0.3);
    let hid = random_block(
        BlockKind::Hidden,
        &mut r,
        3,
        6,
        3,
        1 + (seed as usize % 2),
        classes,
        options,
    );
    out.push(("hidden block", block_error(&spikes, &labels, hid)));
    out
}

fn block_error(x: &Tensor<f64>, labels: &[usize], mut b: TrainingBlock<f64>) -> f64 {
    let analytic = flat_grads(&block_gradients(x, labels, &b).unwrap().grads);
    let mut v = params(&b);
    let fd = central_difference(&mut v, STEP, |p| {
        set_params(&mut b, p);
        block_loss(x, labels, &b).unwrap()
    });
    relative_error(&analytic, &fd)
}
