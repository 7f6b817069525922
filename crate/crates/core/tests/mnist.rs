//! Desk-scale training run on an MNIST subset. Skipped when the dataset
//! files are absent.

use std::path::{Path, PathBuf};

use ffsnn::allocation::{allocate, analyze, Strategy};
use ffsnn::blocks::{evaluate, fit, Architecture, BlockOptions, FitConfig, Network};
use ffsnn::data::{load_idx, standardize, Dataset, Split};

fn data_dir() -> PathBuf {
    std::env::var_os("FFSNN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn load(dir: &Path, prefix: &str, split: Split) -> Option<Dataset> {
    let find = |stem: String| {
        [stem.clone(), format!("{stem}.gz")]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.exists())
    };
    let i = find(format!("{prefix}-images-idx3-ubyte"))?;
    let l = find(format!("{prefix}-labels-idx1-ubyte"))?;
    Some(load_idx(i, l, "mnist", split).unwrap())
}

#[test]
fn three_epochs_on_a_thousand_images() {
    let dir = data_dir().join("mnist");
    let (Some(train), Some(test)) = (load(&dir, "train", Split::Train), load(&dir, "t10k", Split::Test)) else {
        eprintln!("MNIST not found under {}; skipping", dir.display());
        return;
    };
    let (train, stats) = standardize(&train.take(1000).unwrap(), None).unwrap();
    let (test, _) = standardize(&test, Some(&stats)).unwrap();
    let channels = vec![16, 32];
    let arch = Architecture {
        in_channels: 1,
        classes: 10,
        channels: channels.clone(),
        strides: vec![1, 2],
        kernel: 3,
        padding: 1,
        horizon: 10,
        thresh: 1.0,
        levels: 10,
        shift_phi: 0.5,
    };
    let report = analyze(&train.images, &train.labels, 10).unwrap();
    let allocs = channels
        .iter()
        .map(|&c| allocate(&report.complexity, c, 2.0, Strategy::ComplexityAware).unwrap())
        .collect();
    let mut net = Network::<f32>::new(arch, allocs, BlockOptions::default(), 0).unwrap();
    let cfg = FitConfig {
        epochs: 3,
        batch_size: 128,
        lr: 0.01,
        seed: 0,
    };
    fit(&train, &mut net, &cfg, None, |m, _| {
        eprintln!("epoch {} ensemble {:.4}", m.epoch, m.ensemble_accuracy)
    })
    .unwrap();
    let (acc, _) = evaluate(&net, &test).unwrap();
    let majority = *test.class_counts().iter().max().unwrap() as f64 / test.len() as f64;
    eprintln!("test accuracy {acc:.4} (majority class {majority:.4})");
    assert!(acc >= 8.0 * majority);
    assert!(acc >= 0.90, "test accuracy {acc:.4} below 0.90");
}
