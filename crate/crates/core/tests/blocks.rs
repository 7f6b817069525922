//! Block forward oracles, training steps and whole-network behavior.

mod common;

use common::{rand_spikes, rand_tensor, random_block, rng, uniform_alloc};
use ffsnn::allocation::Allocation;
use ffsnn::blocks::{
    block_loss, block_train_step, encoding_forward, fit, hidden_forward, network_forward, predict, Architecture,
    BlockKind, BlockOptions, FitConfig, GoodnessMatrix, Network,
};
use ffsnn::checkpoint::Checkpoint;
use ffsnn::data::{synthetic_classes, Dataset, Preset, SyntheticSpec};
use ffsnn::numerics::{conv2d, normalize, relu, NormMode, NormParams};
use ffsnn::Tensor;

fn arch(channels: &[usize], classes: usize) -> Architecture {
    Architecture {
        in_channels: 1,
        classes,
        channels: channels.to_vec(),
        strides: vec![1; channels.len()],
        kernel: 3,
        padding: 1,
        horizon: 4,
        thresh: 1.0,
        levels: 4,
        shift_phi: 0.5,
    }
}

fn allocations(channels: &[usize], classes: usize) -> Vec<Allocation> {
    channels.iter().map(|&c| uniform_alloc(classes, c)).collect()
}

fn separable(classes: usize, per_class: usize, seed: u64) -> Dataset {
    synthetic_classes(&SyntheticSpec {
        classes,
        per_class,
        shape: [1, 12, 12],
        separation: 6.0,
        preset: Preset::Disjoint,
        seed,
    })
    .unwrap()
}

#[test]
fn encoding_forward_is_the_composition_of_primitives() {
    let mut r = rng(1);
    let b = random_block(BlockKind::Encoding, &mut r, 2, 4, 3, 2, 2, BlockOptions::default());
    let x = rand_tensor(&[3, 2, 6, 6], &mut r, -1.0, 1.0);
    let (y, _) = encoding_forward(&x, &b, true).unwrap();
    let oracle = relu(&normalize(&conv2d(&x, &b.conv).unwrap(), &b.norm, true).unwrap());
    assert_eq!(y, oracle);
    assert!(y.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn encoding_forward_of_zeros_is_zero() {
    let mut r = rng(2);
    let mut b = random_block(BlockKind::Encoding, &mut r, 1, 4, 3, 1, 2, BlockOptions::default());
    b.conv.bias = vec![0.0; 4];
    b.norm.beta = vec![0.0; 4];
    let (y, _) = encoding_forward(&Tensor::zeros(&[2, 1, 5, 5]), &b, true).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn hidden_forward_matches_a_loop_over_steps() {
    let mut r = rng(3);
    let b = random_block(BlockKind::Hidden, &mut r, 3, 4, 3, 1, 2, BlockOptions::default());
    let (t, n, c, h, w) = (3, 2, 3, 5, 5);
    let spikes = rand_spikes(&[t, n, c, h, w], &mut r, 0.4);
    let (y, per_step, _) = hidden_forward(&spikes, &b, true).unwrap();

    let frame = n * c * h * w;
    let mut convs = Vec::new();
    for s in 0..t {
        let xs = Tensor::from_vec(&[n, c, h, w], spikes.data()[s * frame..(s + 1) * frame].to_vec()).unwrap();
        convs.extend_from_slice(conv2d(&xs, &b.conv).unwrap().data());
    }
    let co = b.conv.c_out();
    let stacked = Tensor::from_vec(&[t, n, co, h, w], convs).unwrap();
    let normed = normalize(&stacked, &b.norm, true).unwrap();
    let out_frame = n * co * h * w;
    let mut sum = vec![0.0; out_frame];
    for s in 0..t {
        for (acc, v) in sum.iter_mut().zip(&normed.data()[s * out_frame..(s + 1) * out_frame]) {
            *acc += v;
        }
    }
    let oracle = relu(&Tensor::from_vec(&[n, co, h, w], sum).unwrap());
    assert!(per_step.max_abs_diff(&normed).unwrap() <= 1e-12);
    assert!(y.max_abs_diff(&oracle).unwrap() <= 1e-12);
}

#[test]
fn hidden_forward_of_silence_is_zero() {
    let mut r = rng(4);
    let mut b = random_block(BlockKind::Hidden, &mut r, 2, 4, 3, 1, 2, BlockOptions::default());
    b.norm.beta = vec![0.0; 4];
    let (y, _, _) = hidden_forward(&Tensor::zeros(&[3, 2, 2, 4, 4]), &b, true).unwrap();
    // The constant conv bias cancels up to the rounding of its own mean.
    assert!(y.data().iter().all(|&v| v.abs() <= 1e-12));
}

#[test]
fn single_step_hidden_block_behaves_like_an_encoding_block() {
    let mut r = rng(5);
    let hidden = random_block(BlockKind::Hidden, &mut r, 2, 4, 3, 1, 2, BlockOptions::default());
    let mut enc = hidden.clone();
    enc.kind = BlockKind::Encoding;
    enc.norm = NormParams {
        mode: NormMode::Batch,
        ..hidden.norm.clone()
    };
    let x = rand_spikes(&[1, 3, 2, 5, 5], &mut r, 0.5);
    let (yh, _, _) = hidden_forward(&x, &hidden, true).unwrap();
    let (ye, _) = encoding_forward(&x.clone().reshape(&[3, 2, 5, 5]).unwrap(), &enc, true).unwrap();
    assert!(yh.max_abs_diff(&ye).unwrap() <= 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let mut r = rng(6);
    let mut b = random_block(BlockKind::Encoding, &mut r, 1, 4, 3, 1, 2, BlockOptions::default());
    let before = b.clone();
    let d = separable(2, 4, 0);
    let x = d.images.cast::<f64>();
    block_train_step(&x, &d.labels, &mut b, 0.0).unwrap();
    assert_eq!(b.conv, before.conv);
    assert_eq!(b.norm.gamma, before.norm.gamma);
    assert_eq!(b.norm.beta, before.norm.beta);
}

#[test]
fn one_step_decreases_the_block_loss() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let d = separable(2, 8, seed);
        let x = d.images.cast::<f64>();
        for kind in [BlockKind::Encoding, BlockKind::Hidden] {
            let c_in = 1;
            let mut b = random_block(kind, &mut r, c_in, 4, 3, 1, 2, BlockOptions::default());
            let input = match kind {
                BlockKind::Encoding => x.clone(),
                BlockKind::Hidden => {
                    let s = x.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
                    Tensor::from_vec(&[2, 16, 1, 12, 12], [s.data(), s.data()].concat()).unwrap()
                }
            };
            let before = block_loss(&input, &d.labels, &b).unwrap();
            block_train_step(&input, &d.labels, &mut b, 1e-3).unwrap();
            let after = block_loss(&input, &d.labels, &b).unwrap();
            assert!(after < before, "seed {seed} {kind:?}: {before} -> {after}");
        }
    }
}

#[test]
fn degenerate_network_predicts_class_zero() {
    let channels = [4, 6];
    let mut net = Network::<f64>::new(
        arch(&channels, 3),
        allocations(&channels, 3),
        BlockOptions::default(),
        0,
    )
    .unwrap();
    for b in &mut net.blocks {
        b.conv.kernels = Tensor::zeros(b.conv.kernels.shape());
        b.conv.bias = vec![0.5; b.conv.c_out()];
    }
    let x = rand_tensor(&[5, 1, 8, 8], &mut rng(7), 0.0, 1.0);
    let out = network_forward(&x, &net, false).unwrap();
    for g in &out.goodness {
        for n in 0..5 {
            let row = g.row(n);
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }
    assert_eq!(predict(&x, &net).unwrap(), vec![0; 5]);
}

#[test]
fn network_forward_is_deterministic_and_binary() {
    let channels = [4, 6];
    let net = Network::<f64>::new(
        arch(&channels, 2),
        allocations(&channels, 2),
        BlockOptions::default(),
        3,
    )
    .unwrap();
    let x = rand_tensor(&[4, 1, 8, 8], &mut rng(8), 0.0, 1.0);
    let a = network_forward(&x, &net, false).unwrap();
    let b = network_forward(&x, &net, false).unwrap();
    assert_eq!(a.spikes, b.spikes);
    for (ga, gb) in a.goodness.iter().zip(&b.goodness) {
        assert_eq!(ga.values, gb.values);
    }
    for s in &a.spikes {
        assert_eq!(s.shape()[0], 4);
        assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn isolating_one_block_predicts_with_its_goodness_alone() {
    let channels = [4, 6];
    let mut net = Network::<f64>::new(
        arch(&channels, 2),
        allocations(&channels, 2),
        BlockOptions::default(),
        4,
    )
    .unwrap();
    let x = rand_tensor(&[6, 1, 8, 8], &mut rng(9), 0.0, 1.0);
    let out = network_forward(&x, &net, false).unwrap();
    for keep in 0..2 {
        net.aggregation_weights = vec![0.0, 0.0];
        net.aggregation_weights[keep] = 1.0;
        let g: &GoodnessMatrix = &out.goodness[keep];
        let expected = g.argmax();
        assert_eq!(predict(&x, &net).unwrap(), expected);
    }
}

#[test]
fn larger_goodness_wins() {
    let g = GoodnessMatrix::from_values(1, 2, vec![1.0, std::f64::consts::E]).unwrap();
    assert_eq!(g.argmax(), vec![1]);
}

#[test]
fn tiny_network_memorizes_separable_data() {
    let d = separable(2, 12, 11);
    let channels = [8, 8];
    let mut net = Network::<f32>::new(
        arch(&channels, 2),
        allocations(&channels, 2),
        BlockOptions::default(),
        11,
    )
    .unwrap();
    let cfg = FitConfig {
        epochs: 15,
        batch_size: 8,
        lr: 0.05,
        seed: 11,
    };
    fit(&d, &mut net, &cfg, None, |_, _| {}).unwrap();
    let acc = ffsnn::blocks::evaluate(&net, &d).unwrap().0;
    assert_eq!(acc, 1.0);
}

#[test]
fn zero_epochs_change_nothing() {
    let d = separable(2, 4, 12);
    let channels = [4, 4];
    let mut net = Network::<f32>::new(
        arch(&channels, 2),
        allocations(&channels, 2),
        BlockOptions::default(),
        12,
    )
    .unwrap();
    let before = net.clone();
    let cfg = FitConfig {
        epochs: 0,
        ..FitConfig::default()
    };
    let h = fit(&d, &mut net, &cfg, None, |_, _| {}).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(net, before);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let d = separable(3, 6, 13);
    let channels = [6, 6];
    let run = || {
        let mut net = Network::<f32>::new(
            arch(&channels, 3),
            allocations(&channels, 3),
            BlockOptions::default(),
            13,
        )
        .unwrap();
        let cfg = FitConfig {
            epochs: 2,
            batch_size: 5,
            lr: 0.01,
            seed: 13,
        };
        let h = fit(&d, &mut net, &cfg, Some(&d), |_, _| {}).unwrap();
        (h.epochs, net)
    };
    let (h1, n1) = run();
    let (h2, n2) = run();
    assert_eq!(h1, h2);
    assert_eq!(n1, n2);
}

#[test]
fn later_blocks_never_influence_earlier_ones() {
    let d = separable(2, 6, 14);
    let channels = [4, 6];
    let base = Network::<f32>::new(
        arch(&channels, 2),
        allocations(&channels, 2),
        BlockOptions::default(),
        14,
    )
    .unwrap();
    let mut other = base.clone();
    other.blocks[1] = Network::<f32>::new(
        arch(&channels, 2),
        allocations(&channels, 2),
        BlockOptions::default(),
        99,
    )
    .unwrap()
    .blocks[1]
        .clone();
    let cfg = FitConfig {
        epochs: 2,
        batch_size: 4,
        lr: 0.02,
        seed: 14,
    };
    let mut a = base.clone();
    let mut b = other;
    fit(&d, &mut a, &cfg, None, |_, _| {}).unwrap();
    fit(&d, &mut b, &cfg, None, |_, _| {}).unwrap();
    assert_eq!(a.blocks[0], b.blocks[0]);
    assert_ne!(a.blocks[1], b.blocks[1]);
}

#[test]
fn checkpoint_round_trip_preserves_the_network() {
    let d = separable(2, 4, 15);
    let channels = [4, 6];
    let mut net = Network::<f32>::new(
        arch(&channels, 2),
        allocations(&channels, 2),
        BlockOptions::default(),
        15,
    )
    .unwrap();
    let cfg = FitConfig {
        epochs: 1,
        batch_size: 4,
        lr: 0.01,
        seed: 15,
    };
    fit(&d, &mut net, &cfg, None, |_, _| {}).unwrap();
    let bytes = net.to_checkpoint().unwrap().to_bytes().unwrap();
    let back = Network::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    assert_eq!(predict(&d.images, &back).unwrap(), predict(&d.images, &net).unwrap());
}
