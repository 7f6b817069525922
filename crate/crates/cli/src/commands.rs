use std::path::{Path, PathBuf};

use ffsnn::allocation::{allocate, analyze, Allocation, SimilarityReport, Strategy};
use ffsnn::blocks::{
    encoding_forward, evaluate, fit, network_forward, Architecture, EpochMetrics, History, Network, INFERENCE_BATCH,
};
use ffsnn::checkpoint::{Checkpoint, NamedArray};
use ffsnn::data::{
    load_cifar10, load_idx, standardize, synthetic_classes, ChannelStats, DataError, Dataset, Split, SyntheticSpec,
};
use ffsnn::energy::{
    compute_mj, count_ops, count_ops_dense, estimate_energy, param_breakdown, NetDescriptor, OpCounts,
};
use ffsnn::{Error, Result, Tensor};

use crate::config::{DatasetKind, ExperimentConfig, FeatureSource};
use crate::output::{thousands, write_atomic, Csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.ffga";
const STATS_MEAN: &str = "input.mean";
const STATS_STD: &str = "input.std";

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(DataError::Io {
        path: dir.join(stem),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found (also tried .gz)"),
    }
    .into())
}

fn load_raw(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.data_dir();
    let name = cfg.dataset.as_str();
    match cfg.dataset {
        DatasetKind::Mnist | DatasetKind::FashionMnist => Ok((
            load_idx(
                find(&dir, "train-images-idx3-ubyte")?,
                find(&dir, "train-labels-idx1-ubyte")?,
                name,
                Split::Train,
            )?,
            load_idx(
                find(&dir, "t10k-images-idx3-ubyte")?,
                find(&dir, "t10k-labels-idx1-ubyte")?,
                name,
                Split::Test,
            )?,
        )),
        DatasetKind::Cifar10 => {
            let base = if dir.join("cifar-10-batches-bin").is_dir() {
                dir.join("cifar-10-batches-bin")
            } else {
                dir
            };
            let train: Vec<PathBuf> = (1..=5)
                .map(|i| find(&base, &format!("data_batch_{i}.bin")))
                .collect::<Result<_>>()?;
            Ok((
                load_cifar10(&train, name, Split::Train)?,
                load_cifar10(&[find(&base, "test_batch.bin")?], name, Split::Test)?,
            ))
        }
        DatasetKind::Synthetic => {
            let spec = |per_class, seed| SyntheticSpec {
                classes: cfg.synthetic_classes,
                per_class,
                shape: cfg.synthetic_shape,
                separation: cfg.synthetic_separation,
                preset: cfg.synthetic_preset,
                seed,
            };
            let mut train = synthetic_classes(&spec(cfg.synthetic_per_class, cfg.seed))?;
            let mut test = synthetic_classes(&spec(cfg.synthetic_per_class, cfg.seed ^ 0x7e57))?;
            train.meta.split = Split::Train;
            test.meta.split = Split::Test;
            Ok((train, test))
        }
    }
}

fn limit(d: Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n >= d.len() {
        Ok(d)
    } else {
        d.take(n)
    }
}

/// Train and test splits after limits and standardization (train stats).
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Option<ChannelStats>)> {
    let (train, test) = load_raw(cfg)?;
    let (train, test) = (limit(train, cfg.train_limit)?, limit(test, cfg.test_limit)?);
    if !cfg.standardize {
        return Ok((train, test, None));
    }
    let (train, stats) = standardize(&train, None)?;
    let (test, _) = standardize(&test, Some(&stats))?;
    Ok((train, test, Some(stats)))
}

fn flatten(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    x.clone().reshape(&[n, x.len() / n.max(1)])
}

/// Feature rows used for the similarity analysis.
fn features(cfg: &ExperimentConfig, train: &Dataset) -> Result<Tensor<f32>> {
    match cfg.feature_source {
        FeatureSource::RawPixels => flatten(&train.images),
        FeatureSource::Encoder => {
            // A one-block network with uniform channels, trained for one epoch.
            let k = train.meta.classes;
            let mut arch = cfg.architecture(train.image_shape()[0], k);
            arch.channels.truncate(1);
            arch.strides.truncate(1);
            let alloc = allocate(&vec![0.0; k], arch.channels[0], cfg.alloc_phi, Strategy::Uniform)?;
            let mut net = Network::<f32>::new(arch, vec![alloc], cfg.block_options(), cfg.seed)?;
            let mut fc = cfg.fit_config();
            fc.epochs = 1;
            fit(train, &mut net, &fc, None, |_, _| {})?;
            let [n, c, h, w] = train.images.dims4("features")?;
            let per = c * h * w;
            let mut rows = Vec::new();
            let mut width = 0;
            for start in (0..n).step_by(INFERENCE_BATCH) {
                let end = (start + INFERENCE_BATCH).min(n);
                let chunk = Tensor::from_vec(
                    &[end - start, c, h, w],
                    train.images.data()[start * per..end * per].to_vec(),
                )?;
                let (y, _) = encoding_forward(&chunk, &net.blocks[0], false)?;
                width = y.len() / (end - start);
                rows.extend_from_slice(y.data());
            }
            Tensor::from_vec(&[n, width], rows)
        }
    }
}

pub fn allocations_for(
    cfg: &ExperimentConfig,
    report: &SimilarityReport,
    strategy: Strategy,
) -> Result<Vec<Allocation>> {
    cfg.arch
        .iter()
        .map(|&c| allocate(&report.complexity, c, cfg.alloc_phi, strategy))
        .collect()
}

/// Similarity analysis of the training split. Raw-pixel features are taken
/// before standardization, so `stats` (if the split was standardized) is
/// inverted first.
pub fn similarity(cfg: &ExperimentConfig, train: &Dataset, stats: Option<&ChannelStats>) -> Result<SimilarityReport> {
    let feats = match (cfg.feature_source, stats) {
        (FeatureSource::RawPixels, Some(s)) => flatten(&unstandardize(&train.images, s)?)?,
        _ => features(cfg, train)?,
    };
    analyze(&feats, &train.labels, train.meta.classes)
}

fn unstandardize(x: &Tensor<f32>, s: &ChannelStats) -> Result<Tensor<f32>> {
    let [_, c, h, w] = x.dims4("similarity")?;
    let hw = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            (v as f64 * s.std[ch] + s.mean[ch]) as f32
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn build_network(cfg: &ExperimentConfig, train: &Dataset, allocations: Vec<Allocation>) -> Result<Network<f32>> {
    let arch = cfg.architecture(train.image_shape()[0], train.meta.classes);
    let mut net = Network::new(arch, allocations, cfg.block_options(), cfg.seed)?;
    if !cfg.aggregate_encoder && net.blocks.len() > 1 {
        net.aggregation_weights[0] = 0.0;
    }
    Ok(net)
}

fn f(v: f64) -> String {
    v.to_string()
}

fn allocation_csv(allocs: &[Allocation]) -> Csv {
    let mut csv = Csv::new(["block", "strategy", "class", "channels"]);
    for (b, a) in allocs.iter().enumerate() {
        for (j, &c) in a.channels_per_class.iter().enumerate() {
            csv.push(vec![
                b.to_string(),
                a.strategy.as_str().into(),
                j.to_string(),
                c.to_string(),
            ]);
        }
    }
    csv
}

pub struct AnalyzeOutput {
    pub report: SimilarityReport,
    pub allocations: Vec<Allocation>,
}

/// Writes `similarity.csv`, `complexity.csv` and `allocation.csv`.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<AnalyzeOutput> {
    let (train, _, stats) = load_data(cfg)?;
    let report = similarity(cfg, &train, stats.as_ref())?;
    let allocations = allocations_for(cfg, &report, cfg.alloc_strategy)?;
    let k = report.matrix.len();

    let mut sim = Csv::new(std::iter::once("class".to_string()).chain((0..k).map(|j| j.to_string())));
    for (i, row) in report.matrix.iter().enumerate() {
        sim.push(
            std::iter::once(i.to_string())
                .chain(row.iter().map(|&v| f(v)))
                .collect(),
        );
    }
    sim.write(&out.join("similarity.csv"))?;

    let mut cx = Csv::new(["class", "samples", "complexity"]);
    for j in 0..k {
        cx.push(vec![
            j.to_string(),
            report.sample_counts[j].to_string(),
            f(report.complexity[j]),
        ]);
    }
    cx.write(&out.join("complexity.csv"))?;
    allocation_csv(&allocations).write(&out.join("allocation.csv"))?;
    Ok(AnalyzeOutput { report, allocations })
}

fn metrics_header(blocks: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string()];
    h.extend((0..blocks).map(|i| format!("block{i}_loss")));
    h.extend((0..blocks).map(|i| format!("block{i}_acc")));
    h.push("ensemble_acc".into());
    h.push("test_acc".into());
    h.extend((0..blocks).map(|i| format!("layer{i}_spike_rate")));
    h
}

fn metrics_row(m: &EpochMetrics) -> Vec<String> {
    let mut r = vec![m.epoch.to_string()];
    r.extend(m.block_loss.iter().map(|&v| f(v)));
    r.extend(m.block_accuracy.iter().map(|&v| f(v)));
    r.push(f(m.ensemble_accuracy));
    r.push(m.test_accuracy.map(f).unwrap_or_default());
    r.extend(m.spike_rate.iter().map(|&v| f(v)));
    r
}

/// Mean firing rate of every spiking layer on up to 1024 samples, in
/// inference mode.
pub fn measure_spike_rates(net: &Network<f32>, d: &Dataset) -> Result<Vec<f64>> {
    let n = d.len().min(8 * INFERENCE_BATCH);
    let mut sums = vec![0.0; net.blocks.len()];
    let mut seen = 0;
    for start in (0..n).step_by(INFERENCE_BATCH) {
        let end = (start + INFERENCE_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = d.select(&idx)?;
        let out = network_forward(&chunk.images, net, false)?;
        for (s, r) in sums.iter_mut().zip(&out.spike_rates) {
            *s += r * (end - start) as f64;
        }
        seen += end - start;
    }
    Ok(sums.iter().map(|s| s / seen.max(1) as f64).collect())
}

pub fn save_checkpoint(net: &Network<f32>, stats: Option<&ChannelStats>, path: &Path) -> Result<()> {
    let mut ck = net.to_checkpoint()?;
    if let Some(s) = stats {
        for (name, v) in [(STATS_MEAN, &s.mean), (STATS_STD, &s.std)] {
            ck.arrays.push(NamedArray {
                name: name.into(),
                shape: vec![v.len()],
                data: v.iter().map(|&x| x as f32).collect(),
            });
        }
    }
    write_atomic(path, &ck.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, Option<ChannelStats>)> {
    let ck = Checkpoint::load(path)?;
    let net = Network::from_checkpoint(&ck)?;
    let stats = match (ck.get(STATS_MEAN), ck.get(STATS_STD)) {
        (Ok(m), Ok(s)) => Some(ChannelStats {
            mean: m.data.iter().map(|&v| v as f64).collect(),
            std: s.data.iter().map(|&v| v as f64).collect(),
        }),
        _ => None,
    };
    Ok((net, stats))
}

pub struct TrainOutput {
    pub history: History,
    pub network: Network<f32>,
    pub spike_rates: Vec<f64>,
}

/// Trains a network and writes `metrics.csv`, `timing.csv`,
/// `spike_rates.csv`, `allocation.csv`, `config.txt` and the checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutput> {
    let (train, test, stats) = load_data(cfg)?;
    let report = similarity(cfg, &train, stats.as_ref())?;
    let allocations = allocations_for(cfg, &report, cfg.alloc_strategy)?;
    let mut net = build_network(cfg, &train, allocations.clone())?;
    write_atomic(&out.join("config.txt"), cfg.serialize().as_bytes())?;
    allocation_csv(&allocations).write(&out.join("allocation.csv"))?;

    let mut metrics = Csv::new(metrics_header(net.blocks.len()));
    let mut timing = Csv::new(["epoch", "seconds"]);
    metrics.write(&out.join("metrics.csv"))?;
    let mut write_err = None;
    let history = fit(&train, &mut net, &cfg.fit_config(), Some(&test), |m, secs| {
        metrics.push(metrics_row(m));
        timing.push(vec![m.epoch.to_string(), format!("{secs:.3}")]);
        if let Err(e) = metrics
            .write(&out.join("metrics.csv"))
            .and_then(|_| timing.write(&out.join("timing.csv")))
        {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    timing.write(&out.join("timing.csv"))?;

    let spike_rates = measure_spike_rates(&net, &test)?;
    let mut sr = Csv::new(["layer", "spike_rate"]);
    for (i, r) in spike_rates.iter().enumerate() {
        sr.push(vec![i.to_string(), f(*r)]);
    }
    sr.write(&out.join("spike_rates.csv"))?;
    save_checkpoint(&net, stats.as_ref(), &out.join(CHECKPOINT_FILE))?;
    Ok(TrainOutput {
        history,
        network: net,
        spike_rates,
    })
}

#[derive(Debug)]
pub struct EvalOutput {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates a checkpoint on one split; writes `confusion.csv` and
/// `eval.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, split: Split, out: &Path) -> Result<EvalOutput> {
    let (net, stats) = load_checkpoint(checkpoint)?;
    let (train, test) = load_raw(cfg)?;
    let d = match split {
        Split::Train => limit(train, cfg.train_limit)?,
        _ => limit(test, cfg.test_limit)?,
    };
    let d = match &stats {
        Some(s) => standardize(&d, Some(s))?.0,
        None => d,
    };
    if d.meta.classes > net.classes() {
        return Err(Error::Config(format!(
            "data has {} classes, checkpoint has {}",
            d.meta.classes,
            net.classes()
        )));
    }
    let (accuracy, pred) = evaluate(&net, &d)?;
    let k = net.classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in d.labels.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|j| confusion[j][j]).sum();

    let mut cm = Csv::new(std::iter::once("true\\pred".to_string()).chain((0..k).map(|j| j.to_string())));
    for (i, row) in confusion.iter().enumerate() {
        cm.push(
            std::iter::once(i.to_string())
                .chain(row.iter().map(|c| c.to_string()))
                .collect(),
        );
    }
    cm.write(&out.join("confusion.csv"))?;
    let mut summary = Csv::new(["split", "samples", "correct", "accuracy"]);
    summary.push(vec![
        if split == Split::Train { "train" } else { "test" }.into(),
        d.len().to_string(),
        correct.to_string(),
        f(accuracy),
    ]);
    summary.write(&out.join("eval.csv"))?;
    Ok(EvalOutput {
        accuracy,
        correct,
        total: d.len(),
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Trains one network per allocation strategy from the same seed and
/// writes `ablation.csv` (one row per strategy and epoch).
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let (train, test, stats) = load_data(cfg)?;
    let report = similarity(cfg, &train, stats.as_ref())?;
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let allocs = allocations_for(cfg, &report, strategy)?;
        let mut net = build_network(cfg, &train, allocs)?;
        let history = fit(&train, &mut net, &cfg.fit_config(), Some(&test), |_, _| {})?;
        for m in &history.epochs {
            rows.push(AblationRow {
                strategy,
                epoch: m.epoch,
                train_acc: m.ensemble_accuracy,
                test_acc: m.test_accuracy.unwrap_or(f64::NAN),
            });
        }
    }
    let mut csv = Csv::new(["strategy", "epoch", "train_acc", "test_acc"]);
    for r in &rows {
        csv.push(vec![
            r.strategy.as_str().into(),
            r.epoch.to_string(),
            f(r.train_acc),
            f(r.test_acc),
        ]);
    }
    csv.write(&out.join("ablation.csv"))?;
    Ok(rows)
}

/// Input `[C, H, W]` implied by the configured dataset.
pub fn input_shape(cfg: &ExperimentConfig) -> [usize; 3] {
    match cfg.dataset {
        DatasetKind::Mnist | DatasetKind::FashionMnist => [1, 28, 28],
        DatasetKind::Cifar10 => [3, 32, 32],
        DatasetKind::Synthetic => cfg.synthetic_shape,
    }
}

/// Reads a `layer,spike_rate` CSV.
pub fn read_spike_rates(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rates = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let rate = line
            .split(',')
            .nth(1)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("{}: line {} is not `layer,rate`", path.display(), no + 1)))?;
        rates.push(rate);
    }
    Ok(rates)
}

pub struct EnergyOutput {
    pub spiking: OpCounts,
    pub dense: OpCounts,
    pub csv: Csv,
    pub table: String,
}

/// Costs the architecture of `checkpoint` (or of the config) as a spiking
/// network and as a dense CNN; writes `energy.csv` when `out` is given.
pub fn cmd_energy(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    spike_csv: Option<&Path>,
    out: Option<&Path>,
) -> Result<EnergyOutput> {
    let [c, h, w] = input_shape(cfg);
    let arch: Architecture = match checkpoint {
        Some(p) => load_checkpoint(p)?.0.arch,
        None => cfg.architecture(c, 1),
    };
    let desc = NetDescriptor::from(&arch);
    let hidden = arch.channels.len() - 1;
    let rates = match spike_csv {
        Some(p) => {
            let r = read_spike_rates(p)?;
            if r.len() < hidden {
                return Err(Error::Config(format!(
                    "{} lists {} layers, the network has {hidden} hidden layers",
                    p.display(),
                    r.len()
                )));
            }
            r[..hidden].to_vec()
        }
        None => {
            log::warn!("no spike-rate file given; costing hidden layers at rate 1.0");
            vec![1.0; hidden]
        }
    };
    let spiking = count_ops(&desc, (h, w), &rates)?;
    let dense = count_ops_dense(&desc, (h, w))?;
    let k = &cfg.energy;
    let breakdown = param_breakdown(&desc);

    let mut csv = Csv::new([
        "model",
        "params",
        "channel_weights",
        "norm_affine",
        "macs",
        "acs",
        "mem_reads",
        "mem_writes",
        "hidden_compute_mj",
        "mem_mj",
        "compute_mj",
        "total_mj",
        "e_mac",
        "e_ac",
        "e_mem_read",
        "e_mem_write",
        "constants",
    ]);
    let mut table = format!(
        "{:<8} {:>12} {:>14} {:>14} {:>12} {:>12} {:>12}\n",
        "model", "params", "MACs", "ACs", "mem mJ", "compute mJ", "total mJ"
    );
    for (name, counts) in [("spiking", &spiking), ("dense", &dense)] {
        let report = estimate_energy(counts, k)?;
        let hidden_mj: f64 = counts.per_layer[1..].iter().map(|l| compute_mj(l.macs, l.acs, k)).sum();
        csv.push(vec![
            name.into(),
            counts.params.to_string(),
            breakdown.channel_weights.to_string(),
            breakdown.norm_affine.to_string(),
            counts.macs.to_string(),
            counts.acs.to_string(),
            counts.mem_reads.to_string(),
            counts.mem_writes.to_string(),
            f(hidden_mj),
            f(report.mem_mj),
            f(report.compute_mj),
            f(report.total_mj),
            f(k.e_mac),
            f(k.e_ac),
            f(k.e_mem_read),
            f(k.e_mem_write),
            k.label.clone(),
        ]);
        table.push_str(&format!(
            "{:<8} {:>12} {:>14} {:>14} {:>12.6} {:>12.6} {:>12.6}\n",
            name,
            thousands(counts.params),
            thousands(counts.macs),
            thousands(counts.acs),
            report.mem_mj,
            report.compute_mj,
            report.total_mj
        ));
    }
    if let Some(dir) = out {
        csv.write(&dir.join("energy.csv"))?;
    }
    Ok(EnergyOutput {
        spiking,
        dense,
        csv,
        table,
    })
}
