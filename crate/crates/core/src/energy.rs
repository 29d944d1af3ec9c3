//! Synaptic-operation counting and CMOS energy estimates.
//!
//! For a layer with `FLOPs(l)` multiply-accumulates per sample and step,
//! `SOPs(l) = FLOPs(l) × S_r(l)`, where the spike rate `S_r` is the total
//! number of spikes over all timesteps divided by the neuron count (so it
//! lies in `[0, T]`). The spiking network is costed at `E_ACC` per SOP, a
//! same-shape conventional network at `E_MAC` per FLOP.
//!
//! Which spikes drive a layer: an operator followed directly by a neuron
//! layer uses that layer's output rate; any other operator uses the rate of
//! the spike layers feeding it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::BatchNormMode;
use crate::error::{Error, Result};
use crate::layers::{conv_flops, Forward, LayerKind, LayerSpec};
use crate::model::DehazeModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-operation energies in joules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmosCosts {
    pub e_mac: f64,
    pub e_acc: f64,
}

impl Default for CmosCosts {
    /// 45 nm CMOS: 4.6 pJ per MAC, 0.9 pJ per accumulate.
    fn default() -> Self {
        Self {
            e_mac: 4.6e-12,
            e_acc: 0.9e-12,
        }
    }
}

impl CmosCosts {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_acc > 0.0) {
            return Err(Error::Config("CMOS costs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyMode {
    /// Every layer costed with `E_ACC × SOPs`.
    Strict,
    /// Direct-coded first convolutions costed with `E_MAC × FLOPs`.
    #[default]
    MacFirst,
}

impl std::str::FromStr for EnergyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Self::Strict),
            "mac-first" => Ok(Self::MacFirst),
            other => Err(Error::Config(format!("unknown energy mode {other:?} (strict|mac-first)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RateSource {
    /// Output spikes of the named neuron layer.
    Output(String),
    /// Spikes of the named layers feeding the operator, pooled.
    Input(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynapticKind {
    Conv,
    DepthwiseConv,
    Deconv,
    MatMul,
}

/// A costed operator seen during a traced forward pass.
#[derive(Clone, Debug)]
pub struct SynapticOp {
    pub name: String,
    pub kind: SynapticKind,
    /// Multiply-accumulates per sample and timestep.
    pub flops: u64,
    pub rate: RateSource,
    /// Receives real-valued frames rather than spikes.
    pub direct_coded: bool,
}

/// Output spikes of one neuron layer over a whole forward pass.
#[derive(Clone, Debug)]
pub struct SpikeRecord {
    pub name: String,
    /// Time-major `[T·B, …]` binary tensor.
    pub spikes: Tensor,
    pub steps: usize,
    pub batch: usize,
}

impl SpikeRecord {
    pub fn spike_count(&self) -> u64 {
        self.spikes.data().iter().filter(|&&s| s != 0.0).count() as u64
    }

    /// Neurons in the layer for one sample.
    pub fn neurons(&self) -> u64 {
        (self.spikes.numel() / (self.steps * self.batch).max(1)) as u64
    }

    pub fn rate(&self) -> Result<f64> {
        spike_rate(self.spike_count(), self.neurons() * self.batch as u64)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SpikeTrace {
    pub neurons: Vec<SpikeRecord>,
    pub ops: Vec<SynapticOp>,
}

impl SpikeTrace {
    pub fn record(&self, name: &str) -> Result<&SpikeRecord> {
        self.neurons
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Unsupported(format!("no spike record for layer {name}")))
    }
}

/// Multiply count of a conv-like layer on an `in_h × in_w` input:
/// `C_in × C_out × k² × out_h × out_w` (per group for depthwise, over input
/// positions for transposed convolutions).
pub fn flops_conv(spec: &LayerSpec, in_h: usize, in_w: usize) -> Result<u64> {
    match spec.kind {
        LayerKind::Conv => {
            let (oh, ow) = spec.output_hw(in_h, in_w)?;
            Ok(conv_flops(spec, 1, oh, ow))
        }
        LayerKind::DwConv => {
            let (oh, ow) = spec.output_hw(in_h, in_w)?;
            Ok(conv_flops(spec, spec.c_in, oh, ow))
        }
        LayerKind::Deconv => {
            Ok(spec.c_in as u64 * spec.c_out as u64 * (spec.kernel * spec.kernel) as u64 * (in_h * in_w) as u64)
        }
        LayerKind::Pool | LayerKind::BatchNorm => {
            Err(Error::Unsupported(format!("{:?} layers perform no synaptic operations", spec.kind)))
        }
    }
}

/// Total spikes over all timesteps divided by the neuron count.
pub fn spike_rate(total_spikes: u64, neurons: u64) -> Result<f64> {
    if neurons == 0 {
        return Err(Error::Unsupported("spike rate of an empty layer".into()));
    }
    Ok(total_spikes as f64 / neurons as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Costing {
    Acc,
    Mac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub layer: String,
    /// Over the whole batch and all timesteps.
    pub spike_count: u64,
    /// Per sample.
    pub neurons: u64,
    pub samples: u64,
    pub spike_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub kind: SynapticKind,
    pub flops: u64,
    /// Spikes per sample of the driving layers.
    pub spike_count: f64,
    /// Neurons per sample of the driving layers.
    pub neurons: u64,
    pub spike_rate: f64,
    pub sops: f64,
    pub costing: Costing,
    pub energy_joules: f64,
    pub cnn_energy_joules: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub flops: u64,
    pub sops: f64,
    pub sops_g: f64,
    pub energy_snn_joules: f64,
    pub energy_cnn_joules: f64,
    pub delta_e_percent: f64,
    /// `E_CNN / E_SNN`; absent when the network is silent.
    pub energy_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub mode: EnergyMode,
    pub costs: CmosCosts,
    pub timesteps: usize,
    pub samples: usize,
    pub neuron_layers: Vec<NeuronRow>,
    pub rows: Vec<LayerRow>,
    pub totals: Totals,
}

impl EnergyLedger {
    pub fn from_trace(trace: &SpikeTrace, costs: CmosCosts, mode: EnergyMode) -> Result<Self> {
        costs.validate()?;
        let first = trace
            .neurons
            .first()
            .ok_or_else(|| Error::Unsupported("empty spike trace".into()))?;
        let (timesteps, samples) = (first.steps, first.batch);
        let neuron_layers = trace
            .neurons
            .iter()
            .map(|r| {
                Ok(NeuronRow {
                    layer: r.name.clone(),
                    spike_count: r.spike_count(),
                    neurons: r.neurons(),
                    samples: r.batch as u64,
                    spike_rate: r.rate()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rows = Vec::with_capacity(trace.ops.len());
        for op in &trace.ops {
            let names: &[String] = match &op.rate {
                RateSource::Output(n) => std::slice::from_ref(n),
                RateSource::Input(ns) => ns,
            };
            let (mut spikes, mut neurons) = (0u64, 0u64);
            for n in names {
                let r = trace.record(n)?;
                spikes += r.spike_count();
                neurons += r.neurons() * r.batch as u64;
            }
            let rate = spike_rate(spikes, neurons)?;
            let sops = op.flops as f64 * rate;
            let costing = if mode == EnergyMode::MacFirst && op.direct_coded {
                Costing::Mac
            } else {
                Costing::Acc
            };
            let energy = match costing {
                Costing::Acc => sops * costs.e_acc,
                Costing::Mac => op.flops as f64 * costs.e_mac,
            };
            rows.push(LayerRow {
                layer: op.name.clone(),
                kind: op.kind,
                flops: op.flops,
                spike_count: spikes as f64 / samples as f64,
                neurons: neurons / samples as u64,
                spike_rate: rate,
                sops,
                costing,
                energy_joules: energy,
                cnn_energy_joules: op.flops as f64 * costs.e_mac,
            });
        }

        let flops: u64 = rows.iter().map(|r| r.flops).sum();
        let sops: f64 = rows.iter().map(|r| r.sops).sum();
        let e_snn: f64 = rows.iter().map(|r| r.energy_joules).sum();
        let e_cnn: f64 = rows.iter().map(|r| r.cnn_energy_joules).sum();
        let totals = Totals {
            flops,
            sops,
            sops_g: sops * 1e-9,
            energy_snn_joules: e_snn,
            energy_cnn_joules: e_cnn,
            delta_e_percent: if e_cnn > 0.0 { (e_cnn - e_snn) / e_cnn * 100.0 } else { 0.0 },
            energy_ratio: (e_snn > 0.0).then(|| e_cnn / e_snn),
        };
        Ok(Self {
            mode,
            costs,
            timesteps,
            samples,
            neuron_layers,
            rows,
            totals,
        })
    }

    /// Key-value document with the layer rows and totals.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Unsupported(format!("ledger export: {e}")))
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            EnergyMode::Strict => "strict",
            EnergyMode::MacFirst => "mac-first",
        };
        let _ = writeln!(
            s,
            "energy ledger  mode={mode}  T={}  samples={}  E_MAC={:.1} pJ  E_ACC={:.1} pJ",
            self.timesteps,
            self.samples,
            self.costs.e_mac * 1e12,
            self.costs.e_acc * 1e12
        );
        let _ = writeln!(
            s,
            "{:<44} {:>14} {:>9} {:>16} {:>5} {:>12}",
            "layer", "FLOPs", "S_r", "SOPs", "cost", "energy (J)"
        );
        for r in &self.rows {
            let cost = match r.costing {
                Costing::Acc => "ACC",
                Costing::Mac => "MAC",
            };
            let _ = writeln!(
                s,
                "{:<44} {:>14} {:>9.4} {:>16.1} {:>5} {:>12.4e}",
                r.layer, r.flops, r.spike_rate, r.sops, cost, r.energy_joules
            );
        }
        let t = &self.totals;
        let _ = writeln!(s, "total FLOPs      {} ({:.4} G)", t.flops, t.flops as f64 * 1e-9);
        let _ = writeln!(s, "total SOPs       {:.1} ({:.4} G)", t.sops, t.sops_g);
        let _ = writeln!(s, "E_SNN            {:.6e} J", t.energy_snn_joules);
        let _ = writeln!(s, "E_CNN            {:.6e} J", t.energy_cnn_joules);
        let _ = writeln!(s, "energy reduction {:.2} %", t.delta_e_percent);
        match t.energy_ratio {
            Some(r) => {
                let _ = writeln!(s, "E_CNN / E_SNN    {r:.3}");
            }
            None => {
                let _ = writeln!(s, "E_CNN / E_SNN    n/a (no spikes)");
            }
        }
        s.push_str("\nneuron layers\n");
        for n in &self.neuron_layers {
            let _ = writeln!(
                s,
                "{:<44} spikes={:<12} neurons={:<10} S_r={:.4}",
                n.layer, n.spike_count, n.neurons, n.spike_rate
            );
        }
        s
    }
}

/// Eval-mode forward pass that records every neuron layer's spikes and
/// every costed operator.
pub fn trace_forward(model: &DehazeModel, params: &ParamStore, images: &Tensor, steps: usize) -> Result<SpikeTrace> {
    let mut f = Forward::new(params, BatchNormMode::Eval, steps).with_trace();
    model.forward(&mut f, images)?;
    Ok(f.finish().trace.unwrap_or_default())
}

pub fn energy_report(
    model: &DehazeModel,
    params: &ParamStore,
    images: &Tensor,
    steps: usize,
    costs: CmosCosts,
    mode: EnergyMode,
) -> Result<EnergyLedger> {
    let trace = trace_forward(model, params, images, steps)?;
    EnergyLedger::from_trace(&trace, costs, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_formula() {
        let spec = LayerSpec::conv(3, 16, 3, 1, 1);
        assert_eq!(flops_conv(&spec, 4, 4).unwrap(), 6912);
        assert_eq!(flops_conv(&LayerSpec::conv(1, 1, 1, 1, 0), 1, 1).unwrap(), 1);
        assert_eq!(flops_conv(&spec, 4, 8).unwrap(), 2 * 6912);
        let pool = LayerSpec {
            kind: LayerKind::Pool,
            ..spec
        };
        assert!(matches!(flops_conv(&pool, 4, 4), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rates() {
        assert_eq!(spike_rate(32, 16).unwrap(), 2.0);
        assert_eq!(spike_rate(0, 16).unwrap(), 0.0);
        assert!(spike_rate(3, 0).is_err());
        let rec = SpikeRecord {
            name: "a".into(),
            spikes: Tensor::ones(&[4, 2, 3]),
            steps: 4,
            batch: 1,
        };
        assert_eq!(rec.rate().unwrap(), 4.0);
    }

    fn single_layer_trace(spikes: Tensor) -> SpikeTrace {
        SpikeTrace {
            neurons: vec![SpikeRecord {
                name: "n".into(),
                spikes,
                steps: 4,
                batch: 1,
            }],
            ops: vec![SynapticOp {
                name: "conv".into(),
                kind: SynapticKind::Conv,
                flops: 6912,
                rate: RateSource::Output("n".into()),
                direct_coded: true,
            }],
        }
    }

    #[test]
    fn single_layer_ledger() {
        // 16 neurons, 32 spikes over 4 steps
        let spikes = Tensor::from_fn(&[4, 16], |i| if i < 32 { 1.0 } else { 0.0 });
        let trace = single_layer_trace(spikes);
        let strict = EnergyLedger::from_trace(&trace, CmosCosts::default(), EnergyMode::Strict).unwrap();
        let row = &strict.rows[0];
        assert_eq!(row.spike_rate, 2.0);
        assert_eq!(row.sops, 13824.0);
        assert_eq!(row.energy_joules, 13824.0 * 0.9e-12);
        let mac = EnergyLedger::from_trace(&trace, CmosCosts::default(), EnergyMode::MacFirst).unwrap();
        assert_eq!(mac.rows[0].costing, Costing::Mac);
        assert_eq!(mac.rows[0].energy_joules, 6912.0 * 4.6e-12);
    }

    #[test]
    fn silent_network_costs_nothing() {
        let trace = single_layer_trace(Tensor::zeros(&[4, 16]));
        let l = EnergyLedger::from_trace(&trace, CmosCosts::default(), EnergyMode::Strict).unwrap();
        assert_eq!(l.totals.energy_snn_joules, 0.0);
        assert_eq!(l.totals.energy_ratio, None);
        assert!(l.to_text().contains("no spikes"));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("strict".parse::<EnergyMode>().unwrap(), EnergyMode::Strict);
        assert_eq!("mac-first".parse::<EnergyMode>().unwrap(), EnergyMode::MacFirst);
        assert!("fast".parse::<EnergyMode>().is_err());
    }
}
