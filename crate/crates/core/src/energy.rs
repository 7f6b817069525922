//! Parameter counting and an analytical compute/memory energy model.
//!
//! The encoding block sees analog pixels and is costed in multiply-
//! accumulates. Hidden blocks see binary spikes, so each synaptic event is
//! a plain accumulate, scaled by how often the input actually fires.

use serde::{Deserialize, Serialize};

use crate::blocks::Architecture;
use crate::error::{Error, Result};

/// The conv stack as seen by the accounting: no classes, no allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetDescriptor {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub horizon: usize,
}

impl From<&Architecture> for NetDescriptor {
    fn from(a: &Architecture) -> Self {
        NetDescriptor {
            in_channels: a.in_channels,
            channels: a.channels.clone(),
            strides: a.strides[..a.channels.len()].to_vec(),
            kernel: a.kernel,
            padding: a.padding,
            horizon: a.horizon,
        }
    }
}

impl NetDescriptor {
    fn validate(&self) -> Result<()> {
        if self.strides.len() < self.channels.len() {
            return Err(Error::config("energy: fewer strides than layers"));
        }
        if self.kernel == 0 || self.horizon == 0 || self.strides.contains(&0) {
            return Err(Error::config("energy: kernel, horizon and strides must be positive"));
        }
        Ok(())
    }

    fn c_in(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.channels[i - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Kernels plus biases.
    pub conv: u64,
    pub channel_weights: u64,
    /// Normalization gamma and beta.
    pub norm_affine: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.channel_weights + self.norm_affine
    }
}

/// `Σ (C_in·C_out·k² + C_out)` over the conv layers.
pub fn count_params(d: &NetDescriptor) -> u64 {
    param_breakdown(d).conv
}

pub fn param_breakdown(d: &NetDescriptor) -> ParamBreakdown {
    let k2 = (d.kernel * d.kernel) as u64;
    let mut out = ParamBreakdown::default();
    for (i, &c_out) in d.channels.iter().enumerate() {
        let (ci, co) = (d.c_in(i) as u64, c_out as u64);
        out.conv += ci * co * k2 + co;
        out.channel_weights += co;
        out.norm_affine += 2 * co;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub macs: u64,
    pub acs: u64,
    pub mem_reads: u64,
    pub mem_writes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub params: u64,
    pub macs: u64,
    pub acs: u64,
    pub mem_reads: u64,
    pub mem_writes: u64,
    /// Input firing rate of each hidden layer.
    pub spike_rate_per_layer: Vec<f64>,
    pub per_layer: Vec<LayerOps>,
}

fn extents(d: &NetDescriptor, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    let mut cur = (h, w);
    let mut out = Vec::new();
    for i in 0..d.channels.len() {
        let (ph, pw) = (cur.0 + 2 * d.padding, cur.1 + 2 * d.padding);
        if ph < d.kernel || pw < d.kernel {
            return Err(Error::config(format!(
                "energy: layer {i} input {}×{} is smaller than the kernel",
                cur.0, cur.1
            )));
        }
        cur = ((ph - d.kernel) / d.strides[i] + 1, (pw - d.kernel) / d.strides[i] + 1);
        out.push(cur);
    }
    Ok(out)
}

fn tally(d: &NetDescriptor, per_layer: Vec<LayerOps>, rates: Vec<f64>) -> OpCounts {
    OpCounts {
        params: count_params(d),
        macs: per_layer.iter().map(|l| l.macs).sum(),
        acs: per_layer.iter().map(|l| l.acs).sum(),
        mem_reads: per_layer.iter().map(|l| l.mem_reads).sum(),
        mem_writes: per_layer.iter().map(|l| l.mem_writes).sum(),
        spike_rate_per_layer: rates,
        per_layer,
    }
}

/// Per-image counts. `spike_rates[i]` is the firing rate of the spike
/// train entering hidden layer `i + 1`. Each op reads one operand, every
/// output element (per step, for hidden layers) is written once, and each
/// layer's parameters are fetched once.
pub fn count_ops(d: &NetDescriptor, input_hw: (usize, usize), spike_rates: &[f64]) -> Result<OpCounts> {
    d.validate()?;
    let hidden = d.channels.len().saturating_sub(1);
    if spike_rates.len() != hidden {
        return Err(Error::config(format!(
            "{} spike rates for {hidden} hidden layers",
            spike_rates.len()
        )));
    }
    if let Some(r) = spike_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::config(format!("spike rate {r} outside [0, 1]")));
    }
    let ext = extents(d, input_hw.0, input_hw.1)?;
    let k2 = (d.kernel * d.kernel) as u64;
    let t = d.horizon as u64;
    let mut layers = Vec::new();
    for (i, &c_out) in d.channels.iter().enumerate() {
        let (ho, wo) = ext[i];
        let out_elems = (c_out * ho * wo) as u64;
        let dense = d.c_in(i) as u64 * c_out as u64 * k2 * (ho * wo) as u64;
        let params = d.c_in(i) as u64 * c_out as u64 * k2 + c_out as u64;
        layers.push(if i == 0 {
            LayerOps {
                macs: dense,
                acs: 0,
                mem_reads: dense + params,
                mem_writes: out_elems,
            }
        } else {
            let acs = (spike_rates[i - 1] * (dense * t) as f64).round() as u64;
            LayerOps {
                macs: 0,
                acs,
                mem_reads: acs + params,
                mem_writes: out_elems * t,
            }
        });
    }
    Ok(tally(d, layers, spike_rates.to_vec()))
}

/// The same layers costed as an ordinary CNN: every layer dense MACs, one
/// pass, no time axis.
pub fn count_ops_dense(d: &NetDescriptor, input_hw: (usize, usize)) -> Result<OpCounts> {
    d.validate()?;
    let ext = extents(d, input_hw.0, input_hw.1)?;
    let k2 = (d.kernel * d.kernel) as u64;
    let layers = d
        .channels
        .iter()
        .enumerate()
        .map(|(i, &c_out)| {
            let (ho, wo) = ext[i];
            let dense = d.c_in(i) as u64 * c_out as u64 * k2 * (ho * wo) as u64;
            let params = d.c_in(i) as u64 * c_out as u64 * k2 + c_out as u64;
            LayerOps {
                macs: dense,
                acs: 0,
                mem_reads: dense + params,
                mem_writes: (c_out * ho * wo) as u64,
            }
        })
        .collect();
    Ok(tally(d, layers, Vec::new()))
}

/// Joules per operation or access.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
    pub e_mem_read: f64,
    pub e_mem_write: f64,
    pub label: String,
}

impl Default for EnergyConstants {
    /// 45 nm figures: 4.6 pJ per 32-bit MAC, 0.9 pJ per AC, 10 pJ per word
    /// of memory traffic.
    fn default() -> Self {
        EnergyConstants {
            e_mac: 4.6e-12,
            e_ac: 0.9e-12,
            e_mem_read: 10e-12,
            e_mem_write: 10e-12,
            label: "45nm".into(),
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("e_mac", self.e_mac),
            ("e_ac", self.e_ac),
            ("e_mem_read", self.e_mem_read),
            ("e_mem_write", self.e_mem_write),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub mem_mj: f64,
    pub compute_mj: f64,
    pub total_mj: f64,
    pub constants: EnergyConstants,
}

const MJ: f64 = 1e3;

pub fn compute_mj(macs: u64, acs: u64, k: &EnergyConstants) -> f64 {
    (macs as f64 * k.e_mac + acs as f64 * k.e_ac) * MJ
}

pub fn estimate_energy(c: &OpCounts, k: &EnergyConstants) -> Result<EnergyReport> {
    k.validate()?;
    let mem_mj = (c.mem_reads as f64 * k.e_mem_read + c.mem_writes as f64 * k.e_mem_write) * MJ;
    let compute_mj = compute_mj(c.macs, c.acs, k);
    Ok(EnergyReport {
        mem_mj,
        compute_mj,
        total_mj: mem_mj + compute_mj,
        constants: k.clone(),
    })
}
