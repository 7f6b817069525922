//! The integrate-and-fire layer against a step-by-step simulation, and its
//! agreement with the quantized rectifier.

use ffsnn::spiking::{conversion_error, if_forward, quantized_relu, rate_decode, QuantActParams, SpikingLayer};
use ffsnn::Tensor;

/// Spike times (1-based) of one neuron with subtraction reset.
fn simulate(v0: f64, drive: f64, thresh: f64, steps: usize) -> (Vec<usize>, f64) {
    let mut v = v0;
    let mut times = Vec::new();
    for t in 1..=steps {
        v += drive;
        if v >= thresh {
            times.push(t);
            v -= thresh;
        }
    }
    (times, v)
}

#[test]
fn constant_drive_spike_times() {
    let layer = SpikingLayer::new(1.0, 10).unwrap();
    assert_eq!(layer.initial_charge_frac, 0.5);
    let out = if_forward(&Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[0.3]).unwrap(), &layer).unwrap();
    let fired: Vec<usize> = (0..10)
        .filter(|&t| out.spikes.data()[t] == 1.0)
        .map(|t| t + 1)
        .collect();
    assert_eq!(fired, vec![2, 5, 9]);
    assert_eq!(simulate(0.5, 0.3, 1.0, 10).0, fired);
    let err = conversion_error(&out.v_final, &out.v_initial).unwrap();
    assert!(err.data()[0].abs() <= 1e-12, "residual {}", err.data()[0]);
    let rate = rate_decode(&out.spikes, 1.0).unwrap();
    assert!((rate.data()[0] - 0.3).abs() <= 1e-12);
}

#[test]
fn per_step_drive_follows_the_simulation() {
    let drives = [0.2, 0.9, 0.0, 0.4, 0.7, 0.1];
    let layer = SpikingLayer {
        initial_charge_frac: 0.25,
        ..SpikingLayer::new(0.8, drives.len()).unwrap()
    };
    let out = if_forward(
        &Tensor::<f64>::from_f64(&[drives.len(), 1, 1, 1, 1], &drives).unwrap(),
        &layer,
    )
    .unwrap();
    let mut v = 0.25 * 0.8;
    for (t, d) in drives.iter().enumerate() {
        v += d;
        let spike = v >= 0.8;
        if spike {
            v -= 0.8;
        }
        assert_eq!(out.spikes.data()[t], if spike { 1.0 } else { 0.0 }, "step {t}");
    }
    assert!((out.v_final.data()[0] - v).abs() <= 1e-12);
}

#[test]
fn rate_matches_quantized_relu_on_dyadic_grids() {
    // Horizon equals the level count, the preload equals the shift and the
    // threshold equals lambda. Each neuron receives its value every step.
    // Power-of-two grids keep every level boundary exactly representable.
    for (levels, lambda) in [(16, 2.0), (4, 1.0), (8, 0.5)] {
        let layer = SpikingLayer::new(lambda, levels).unwrap();
        let q = QuantActParams {
            lambda,
            levels,
            shift_phi: layer.initial_charge_frac,
        };
        let n = 12 * levels + 1;
        let z: Vec<f64> = (0..n)
            .map(|i| -lambda + i as f64 * lambda / (4 * levels) as f64)
            .collect();
        let zt = Tensor::<f64>::from_f64(&[1, n, 1, 1], &z).unwrap();
        let rates = rate_decode(&if_forward(&zt, &layer).unwrap().spikes, lambda).unwrap();
        assert_eq!(
            rates.data(),
            quantized_relu(&zt, &q).data(),
            "L={levels} lambda={lambda}"
        );
    }
}
