//! The `ffsnn` command line: analyze, train, eval, ablate and energy.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ffsnn::data::Split;
use ffsnn::Error;

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "ffsnn",
    version,
    about = "Layer-local training of convolutional spiking networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Directory holding the dataset files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Train through the quantized activation instead of ReLU.
    #[arg(long)]
    pub quant_in_loss: bool,
    /// Divide goodness by S·H·W even when summing over time steps.
    #[arg(long = "eq5-literal")]
    pub literal_divisor: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class similarity, complexity and channel allocation.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train a network and write metrics plus a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare the three allocation strategies from one seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parameter, operation and energy accounting.
    Energy {
        #[command(flatten)]
        common: Common,
        /// Take the architecture from a checkpoint instead of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `layer,spike_rate` CSV as written by `train`.
        #[arg(long)]
        spike_rates: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn resolve_config(c: &Common) -> ffsnn::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = c.overrides.clone();
    if let Some(d) = &c.data_dir {
        overrides.push(format!("data_dir={}", d.display()));
    }
    if c.quant_in_loss {
        overrides.push("quant_in_loss=true".into());
    }
    if c.literal_divisor {
        overrides.push("eq5_divisor=literal".into());
    }
    cfg.apply_overrides(&overrides)?;
    Ok(cfg)
}

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape { .. } => 2,
        Error::Data(_) | Error::EmptyClass(_) | Error::LabelOutOfRange { .. } | Error::Checkpoint(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

/// Caps the global worker pool at `FFGAF_THREADS` when set.
pub fn init_threads() -> ffsnn::Result<()> {
    if let Ok(v) = std::env::var("FFGAF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("FFGAF_THREADS must be a positive integer, got `{v}`")))?;
        // Fails only if a pool already exists, in which case it stays as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> ffsnn::Result<()> {
    match cli.command {
        Command::Analyze { common, out } => {
            let cfg = resolve_config(&common)?;
            let a = commands::cmd_analyze(&cfg, &out)?;
            for (b, alloc) in a.allocations.iter().enumerate() {
                println!("block {b}: {:?}", alloc.channels_per_class);
            }
        }
        Command::Train { common, out } => {
            let cfg = resolve_config(&common)?;
            let t = commands::cmd_train(&cfg, &out)?;
            if let Some(m) = t.history.epochs.last() {
                println!(
                    "final epoch {}: train {:.4}, test {}",
                    m.epoch,
                    m.ensemble_accuracy,
                    m.test_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let e = commands::cmd_eval(&cfg, &checkpoint, split, &out)?;
            println!("accuracy {:.4} ({}/{})", e.accuracy, e.correct, e.total);
        }
        Command::Ablate { common, out } => {
            let cfg = resolve_config(&common)?;
            let rows = commands::cmd_ablate(&cfg, &out)?;
            for r in rows.iter().filter(|r| r.epoch + 1 == cfg.epochs) {
                println!("{:<16} test {:.4}", r.strategy.as_str(), r.test_acc);
            }
        }
        Command::Energy {
            common,
            checkpoint,
            spike_rates,
            out,
        } => {
            let cfg = resolve_config(&common)?;
            let e = commands::cmd_energy(&cfg, checkpoint.as_deref(), spike_rates.as_deref(), out.as_deref())?;
            print!("{}", e.table);
        }
    }
    Ok(())
}
