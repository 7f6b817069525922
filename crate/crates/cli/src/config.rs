//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected; later assignments (including `--set` overrides) win.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ffsnn::allocation::Strategy;
use ffsnn::blocks::{Architecture, BlockOptions, FitConfig, GoodnessDivisor, LossMode};
use ffsnn::data::Preset;
use ffsnn::energy::EnergyConstants;
use ffsnn::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Synthetic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    fn default_dir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "data/mnist",
            DatasetKind::FashionMnist => "data/fashion",
            DatasetKind::Cifar10 => "data/cifar10",
            DatasetKind::Synthetic => "",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mnist" => DatasetKind::Mnist,
            "fashion_mnist" | "fashion" => DatasetKind::FashionMnist,
            "cifar10" => DatasetKind::Cifar10,
            "synthetic" => DatasetKind::Synthetic,
            _ => return Err(Error::Config(format!("unknown dataset `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    RawPixels,
    /// Outputs of a briefly trained, uniformly allocated encoding block.
    Encoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    /// Use only the first `n` training / test samples (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub standardize: bool,
    pub arch: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub horizon: usize,
    pub thresh: f64,
    pub levels: usize,
    pub shift_phi: f64,
    pub alloc_phi: f64,
    pub alloc_strategy: Strategy,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub goodness_divisor: GoodnessDivisor,
    pub feature_source: FeatureSource,
    pub quant_in_loss: bool,
    /// Include the encoding block's goodness in predictions.
    pub aggregate_encoder: bool,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_shape: [usize; 3],
    pub synthetic_separation: f64,
    pub synthetic_preset: Preset,
    pub energy: EnergyConstants,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            train_limit: 0,
            test_limit: 0,
            standardize: true,
            arch: vec![16, 32],
            strides: vec![1, 2],
            kernel: 3,
            padding: 1,
            horizon: 10,
            thresh: 1.0,
            levels: 10,
            shift_phi: 0.5,
            alloc_phi: 2.0,
            alloc_strategy: Strategy::ComplexityAware,
            lr: 0.01,
            batch_size: 128,
            epochs: 3,
            seed: 0,
            loss_mode: LossMode::Softmax,
            goodness_divisor: GoodnessDivisor::MeanWithT,
            feature_source: FeatureSource::RawPixels,
            quant_in_loss: false,
            aggregate_encoder: true,
            synthetic_classes: 4,
            synthetic_per_class: 500,
            synthetic_shape: [1, 12, 12],
            synthetic_separation: 2.0,
            synthetic_preset: Preset::Skewed,
            energy: EnergyConstants::default(),
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{s}`")))
        })
        .collect()
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "train_limit" => self.train_limit = scalar(key, v)?,
            "test_limit" => self.test_limit = scalar(key, v)?,
            "standardize" => self.standardize = scalar(key, v)?,
            "arch" => self.arch = list(key, v)?,
            "strides" => self.strides = list(key, v)?,
            "kernel" => self.kernel = scalar(key, v)?,
            "padding" => self.padding = scalar(key, v)?,
            "T" => self.horizon = scalar(key, v)?,
            "thresh" => self.thresh = scalar(key, v)?,
            "L" => self.levels = scalar(key, v)?,
            "shift_phi" => self.shift_phi = scalar(key, v)?,
            "alloc_phi" => self.alloc_phi = scalar(key, v)?,
            "alloc_strategy" => self.alloc_strategy = v.parse()?,
            "lr" => self.lr = scalar(key, v)?,
            "batch_size" => self.batch_size = scalar(key, v)?,
            "epochs" => self.epochs = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "loss_mode" => {
                self.loss_mode = match v {
                    "softmax" => LossMode::Softmax,
                    "literal" => LossMode::Literal,
                    _ => return Err(Error::Config(format!("loss_mode: unknown value `{v}`"))),
                }
            }
            "eq5_divisor" => {
                self.goodness_divisor = match v {
                    "mean_with_T" => GoodnessDivisor::MeanWithT,
                    "literal" => GoodnessDivisor::Literal,
                    _ => return Err(Error::Config(format!("eq5_divisor: unknown value `{v}`"))),
                }
            }
            "feature_source" => {
                self.feature_source = match v {
                    "raw_pixels" => FeatureSource::RawPixels,
                    "encoder" => FeatureSource::Encoder,
                    _ => return Err(Error::Config(format!("feature_source: unknown value `{v}`"))),
                }
            }
            "quant_in_loss" => self.quant_in_loss = scalar(key, v)?,
            "aggregate_encoder" => self.aggregate_encoder = scalar(key, v)?,
            "synthetic_classes" => self.synthetic_classes = scalar(key, v)?,
            "synthetic_per_class" => self.synthetic_per_class = scalar(key, v)?,
            "synthetic_shape" => {
                let dims: Vec<usize> = v.split('x').map(|s| scalar(key, s.trim())).collect::<Result<_>>()?;
                self.synthetic_shape = dims
                    .try_into()
                    .map_err(|_| Error::Config(format!("synthetic_shape: expected CxHxW, got `{v}`")))?;
            }
            "synthetic_separation" => self.synthetic_separation = scalar(key, v)?,
            "synthetic_preset" => {
                self.synthetic_preset = match v {
                    "disjoint" => Preset::Disjoint,
                    "skewed" => Preset::Skewed,
                    _ => return Err(Error::Config(format!("synthetic_preset: unknown value `{v}`"))),
                }
            }
            "e_mac" => self.energy.e_mac = scalar(key, v)?,
            "e_ac" => self.energy.e_ac = scalar(key, v)?,
            "e_mem_read" => self.energy.e_mem_read = scalar(key, v)?,
            "e_mem_write" => self.energy.e_mem_write = scalar(key, v)?,
            "energy_label" => self.energy.label = v.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", self.dataset.as_str().into());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        kv("train_limit", self.train_limit.to_string());
        kv("test_limit", self.test_limit.to_string());
        kv("standardize", self.standardize.to_string());
        kv("arch", join(&self.arch));
        kv("strides", join(&self.strides));
        kv("kernel", self.kernel.to_string());
        kv("padding", self.padding.to_string());
        kv("T", self.horizon.to_string());
        kv("thresh", self.thresh.to_string());
        kv("L", self.levels.to_string());
        kv("shift_phi", self.shift_phi.to_string());
        kv("alloc_phi", self.alloc_phi.to_string());
        kv("alloc_strategy", self.alloc_strategy.as_str().into());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "loss_mode",
            match self.loss_mode {
                LossMode::Softmax => "softmax",
                LossMode::Literal => "literal",
            }
            .into(),
        );
        kv(
            "eq5_divisor",
            match self.goodness_divisor {
                GoodnessDivisor::MeanWithT => "mean_with_T",
                GoodnessDivisor::Literal => "literal",
            }
            .into(),
        );
        kv(
            "feature_source",
            match self.feature_source {
                FeatureSource::RawPixels => "raw_pixels",
                FeatureSource::Encoder => "encoder",
            }
            .into(),
        );
        kv("quant_in_loss", self.quant_in_loss.to_string());
        kv("aggregate_encoder", self.aggregate_encoder.to_string());
        kv("synthetic_classes", self.synthetic_classes.to_string());
        kv("synthetic_per_class", self.synthetic_per_class.to_string());
        kv("synthetic_shape", join(&self.synthetic_shape).replace(',', "x"));
        kv("synthetic_separation", self.synthetic_separation.to_string());
        kv(
            "synthetic_preset",
            match self.synthetic_preset {
                Preset::Disjoint => "disjoint",
                Preset::Skewed => "skewed",
            }
            .into(),
        );
        kv("e_mac", self.energy.e_mac.to_string());
        kv("e_ac", self.energy.e_ac.to_string());
        kv("e_mem_read", self.energy.e_mem_read.to_string());
        kv("e_mem_write", self.energy.e_mem_write.to_string());
        kv("energy_label", self.energy.label.clone());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kernel", self.kernel),
            ("T", self.horizon),
            ("L", self.levels),
            ("batch_size", self.batch_size),
            ("synthetic_classes", self.synthetic_classes),
            ("synthetic_per_class", self.synthetic_per_class),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.arch.is_empty() || self.arch.contains(&0) {
            return Err(Error::Config("arch must list positive channel counts".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a non-negative number".into()));
        }
        if !(self.alloc_phi > 0.0 && self.alloc_phi.is_finite()) {
            return Err(Error::Config("alloc_phi must be positive".into()));
        }
        if self.synthetic_shape.contains(&0) {
            return Err(Error::Config("synthetic_shape extents must be positive".into()));
        }
        self.energy.validate()?;
        // Stride list shape and the remaining ranges are checked by the architecture.
        self.architecture(1, 1).validate()
    }

    pub fn architecture(&self, in_channels: usize, classes: usize) -> Architecture {
        Architecture {
            in_channels,
            classes,
            channels: self.arch.clone(),
            strides: self.strides.clone(),
            kernel: self.kernel,
            padding: self.padding,
            horizon: self.horizon,
            thresh: self.thresh,
            levels: self.levels,
            shift_phi: self.shift_phi,
        }
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            loss_mode: self.loss_mode,
            divisor: self.goodness_divisor,
            quant_in_loss: self.quant_in_loss,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(self.dataset.default_dir()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::parse("epochs = 2\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = ExperimentConfig::parse("# desk run\narch = 8, 8\nstrides = 1,2,1\n").unwrap();
        assert_eq!(cfg.arch, vec![8, 8]);
        cfg.apply_overrides(&["epochs=7", "eq5_divisor=literal"]).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.goodness_divisor, GoodnessDivisor::Literal);
    }

    #[test]
    fn inconsistent_strides_rejected() {
        assert!(ExperimentConfig::parse("arch = 8,8\nstrides = 1\n").is_err());
        assert!(ExperimentConfig::parse("arch = 8,8\nstrides = 1,2,2\n").is_err());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::parse("batch_size = 0").is_err());
        assert!(ExperimentConfig::parse("lr = nan").is_err());
        assert!(ExperimentConfig::parse("e_mac = -1").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
    }
}
