//! Spiking layer blocks and the per-pass forward context.
//!
//! All sequence tensors are time-major: `[T·B, C, H, W]`, where the first
//! `B` rows belong to step 0, the next `B` to step 1, and so on. Stateless
//! operators (convolutions, pooling, batch norm) treat the leading axis as a
//! batch; neuron layers walk it in time order.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, RunningStats, Tape, Var};
use crate::energy::{RateSource, SpikeRecord, SpikeTrace, SynapticKind, SynapticOp};
use crate::error::{Error, Result};
use crate::neuron::NeuronConfig;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// State of one forward pass: the tape, parameter bindings, pending
/// batch-norm statistic updates and (optionally) a spike trace.
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: HashMap<String, Var>,
    pub mode: BatchNormMode,
    /// Number of timesteps T.
    pub steps: usize,
    stat_updates: BTreeMap<String, RunningStats>,
    trace: Option<SpikeTrace>,
}

/// What a finished forward pass leaves behind.
pub struct ForwardParts {
    pub tape: Tape,
    pub bound: HashMap<String, Var>,
    pub stat_updates: BTreeMap<String, RunningStats>,
    pub trace: Option<SpikeTrace>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamStore, mode: BatchNormMode, steps: usize) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            mode,
            steps,
            stat_updates: BTreeMap::new(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(SpikeTrace::default());
        self
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    /// Binds a named parameter onto the tape (once per pass). Learnable
    /// entries become differentiable leaves.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self.params.get(name)?;
        let var = match entry.kind {
            ParamKind::Learnable => self.tape.variable(entry.value.clone()),
            ParamKind::Frozen | ParamKind::Buffer => self.tape.constant(entry.value.clone()),
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        match self.stat_updates.get(prefix) {
            Some(s) => Ok(s.clone()),
            None => self.params.running_stats(prefix),
        }
    }

    pub(crate) fn record_spikes(&mut self, name: &str, spikes: Var) {
        let steps = self.steps;
        if let Some(trace) = self.trace.as_mut() {
            let value = self.tape.value(spikes).clone();
            let batch = value.dim(0) / steps;
            trace.neurons.push(SpikeRecord {
                name: name.to_string(),
                spikes: value,
                steps,
                batch,
            });
        }
    }

    pub(crate) fn record_op(&mut self, op: impl FnOnce() -> SynapticOp) {
        if let Some(trace) = self.trace.as_mut() {
            trace.ops.push(op());
        }
    }

    pub fn finish(self) -> ForwardParts {
        ForwardParts {
            tape: self.tape,
            bound: self.bound,
            stat_updates: self.stat_updates,
            trace: self.trace,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    Pool,
    BatchNorm,
    DwConv,
}

/// Static description of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub neuron: Option<NeuronConfig>,
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            neuron: None,
        }
    }

    /// Output spatial size for an `in_h × in_w` input.
    pub fn output_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        match self.kind {
            LayerKind::Conv | LayerKind::DwConv => {
                if s == 0 || in_h + 2 * p < k || in_w + 2 * p < k {
                    return Err(Error::shape("layer", format!("kernel {k} does not fit {in_h}x{in_w}")));
                }
                Ok(((in_h + 2 * p - k) / s + 1, (in_w + 2 * p - k) / s + 1))
            }
            LayerKind::Deconv => {
                let (h, w) = ((in_h - 1) * s + k, (in_w - 1) * s + k);
                if h < 2 * p + 1 || w < 2 * p + 1 {
                    return Err(Error::shape("layer", "deconv padding too large"));
                }
                Ok((h - 2 * p, w - 2 * p))
            }
            LayerKind::Pool => Ok((in_h / 2, in_w / 2)),
            LayerKind::BatchNorm => Ok((in_h, in_w)),
        }
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// 2-D convolution (dense or depthwise).
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub spec: LayerSpec,
    pub bias: bool,
    pub rate: RateSource,
    pub direct_coded: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: LayerSpec, bias: bool, rate: RateSource) -> Self {
        Self {
            name: name.into(),
            spec,
            bias,
            rate,
            direct_coded: false,
        }
    }

    fn groups(&self) -> usize {
        match self.spec.kind {
            LayerKind::DwConv => self.spec.c_in,
            _ => 1,
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        let s = &self.spec;
        [s.c_out, s.c_in / self.groups(), s.kernel, s.kernel]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        store.insert(format!("{}.weight", self.name), kaiming_uniform(rng, &shape, fan_in), ParamKind::Learnable);
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.spec.c_out]), ParamKind::Learnable);
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(f.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        let y = f.tape.conv2d(x, w, b, self.spec.stride, self.spec.padding, self.groups())?;
        if f.tracing() {
            let (oh, ow) = (f.tape.shape(y)[2], f.tape.shape(y)[3]);
            let flops = conv_flops(&self.spec, self.groups(), oh, ow);
            let kind = if self.groups() > 1 {
                SynapticKind::DepthwiseConv
            } else {
                SynapticKind::Conv
            };
            f.record_op(|| SynapticOp {
                name: self.name.clone(),
                kind,
                flops,
                rate: self.rate.clone(),
                direct_coded: self.direct_coded,
            });
        }
        Ok(y)
    }
}

pub(crate) fn conv_flops(spec: &LayerSpec, groups: usize, out_h: usize, out_w: usize) -> u64 {
    (spec.c_in / groups) as u64 * spec.c_out as u64 * (spec.kernel * spec.kernel) as u64 * out_h as u64 * out_w as u64
}

/// Transposed convolution, ×stride upsampling.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub name: String,
    pub spec: LayerSpec,
    pub rate: RateSource,
}

impl Deconv {
    /// 4×4 kernel, stride 2, padding 1: exact ×2 upsampling.
    pub fn upsample2(name: impl Into<String>, c_in: usize, c_out: usize, rate: RateSource) -> Self {
        Self {
            name: name.into(),
            spec: LayerSpec {
                kind: LayerKind::Deconv,
                c_in,
                c_out,
                kernel: 4,
                stride: 2,
                padding: 1,
                neuron: None,
            },
            rate,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let s = &self.spec;
        let fan_in = (s.c_in * s.kernel * s.kernel / (s.stride * s.stride)).max(1);
        let shape = [s.c_in, s.c_out, s.kernel, s.kernel];
        store.insert(format!("{}.weight", self.name), kaiming_uniform(rng, &shape, fan_in), ParamKind::Learnable);
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[s.c_out]), ParamKind::Learnable);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let xs = f.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.spec.c_in {
            return Err(Error::shape(
                "deconv",
                format!("{} expects {} input channels, got {:?}", self.name, self.spec.c_in, xs),
            ));
        }
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = f.param(&format!("{}.bias", self.name))?;
        let y = f.tape.conv_transpose2d(x, w, Some(b), self.spec.stride, self.spec.padding)?;
        let (want_h, want_w) = self.spec.output_hw(xs[2], xs[3])?;
        let ys = f.tape.shape(y);
        if ys[2] != want_h || ys[3] != want_w || (self.spec.stride == 2 && (ys[2] != 2 * xs[2] || ys[3] != 2 * xs[3])) {
            return Err(Error::shape("deconv", format!("output {:?} does not double input {:?}", ys, xs)));
        }
        if f.tracing() {
            let s = &self.spec;
            let flops = s.c_in as u64 * s.c_out as u64 * (s.kernel * s.kernel) as u64 * (xs[2] * xs[3]) as u64;
            f.record_op(|| SynapticOp {
                name: self.name.clone(),
                kind: SynapticKind::Deconv,
                flops,
                rate: self.rate.clone(),
                direct_coded: false,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[c]), ParamKind::Learnable);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[c]), ParamKind::Learnable);
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[c]), ParamKind::Buffer);
        store.insert(format!("{}.running_var", self.name), Tensor::ones(&[c]), ParamKind::Buffer);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let gamma = f.param(&format!("{}.gamma", self.name))?;
        let beta = f.param(&format!("{}.beta", self.name))?;
        let mut stats = f.running_stats(&self.name)?;
        let mode = f.mode;
        let y = f.tape.batchnorm(x, gamma, beta, &mut stats, mode)?;
        if mode == BatchNormMode::Train {
            f.stat_updates.insert(self.name.clone(), stats);
        }
        Ok(y)
    }
}

/// Adaptive LIF layer with one scalar threshold.
#[derive(Clone, Debug)]
pub struct Alif {
    pub name: String,
    pub cfg: NeuronConfig,
}

impl Alif {
    pub fn new(name: impl Into<String>, cfg: NeuronConfig) -> Self {
        Self { name: name.into(), cfg }
    }

    pub fn threshold_name(&self) -> String {
        format!("{}.v_th", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) {
        let kind = if self.cfg.adaptive {
            ParamKind::Learnable
        } else {
            ParamKind::Frozen
        };
        store.insert(self.threshold_name(), Tensor::full(&[1], self.cfg.v_th_init), kind);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let th = f.param(&self.threshold_name())?;
        let steps = f.steps;
        let s = f.tape.lif_sequence(x, th, self.cfg.zeta, self.cfg.lambda, steps)?;
        f.record_spikes(&self.name, s);
        Ok(s)
    }
}

/// Spike coding: stride-2 conv on the real-valued frames, then ALIF.
#[derive(Clone, Debug)]
pub struct SpikeCoder {
    pub conv: Conv,
    pub alif: Alif,
}

impl SpikeCoder {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, cfg: NeuronConfig) -> Self {
        let alif = Alif::new(format!("{prefix}.alif"), cfg);
        let mut conv = Conv::new(
            format!("{prefix}.conv"),
            LayerSpec::conv(c_in, c_out, 3, 2, 1),
            true,
            RateSource::Output(alif.name.clone()),
        );
        conv.direct_coded = true;
        Self { conv, alif }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
        self.alif.init(store);
    }

    /// `[T·B, 3, H, W]` real frames → `[T·B, C, H/2, W/2]` spikes.
    pub fn forward(&self, f: &mut Forward, frames: Var) -> Result<Var> {
        let s = f.tape.shape(frames);
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("spike_code", format!("spatial dims must be even, got {:?}", s)));
        }
        let x = self.conv.forward(f, frames)?;
        self.alif.forward(f, x)
    }
}

/// Conv(3×3) → ALIF → MaxPool(2).
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub conv: Conv,
    pub alif: Alif,
}

impl EncoderStage {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, cfg: NeuronConfig) -> Self {
        let alif = Alif::new(format!("{prefix}.alif"), cfg);
        let conv = Conv::new(
            format!("{prefix}.conv"),
            LayerSpec::conv(c_in, c_out, 3, 1, 1),
            true,
            RateSource::Output(alif.name.clone()),
        );
        Self { conv, alif }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
        self.alif.init(store);
    }

    pub fn forward(&self, f: &mut Forward, spikes: Var) -> Result<Var> {
        let x = self.conv.forward(f, spikes)?;
        let s = self.alif.forward(f, x)?;
        f.tape.maxpool2d(s)
    }
}

/// How a decoder stage ends.
#[derive(Clone, Debug)]
pub enum DecoderHead {
    Spiking(Alif),
    /// Non-resetting membrane readout with decay ζ.
    Readout { zeta: f32 },
}

/// DeConv(×2) → ALIF, or → membrane readout for the final stage.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub deconv: Deconv,
    pub head: DecoderHead,
}

impl DecoderStage {
    pub fn spiking(prefix: &str, c_in: usize, c_out: usize, cfg: NeuronConfig) -> Self {
        let alif = Alif::new(format!("{prefix}.alif"), cfg);
        let deconv = Deconv::upsample2(format!("{prefix}.deconv"), c_in, c_out, RateSource::Output(alif.name.clone()));
        Self {
            deconv,
            head: DecoderHead::Spiking(alif),
        }
    }

    /// Final stage; `inputs` names the spike layers that feed the deconv.
    pub fn readout(prefix: &str, c_in: usize, c_out: usize, zeta: f32, inputs: Vec<String>) -> Self {
        Self {
            deconv: Deconv::upsample2(format!("{prefix}.deconv"), c_in, c_out, RateSource::Input(inputs)),
            head: DecoderHead::Readout { zeta },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.deconv.init(store, rng);
        if let DecoderHead::Spiking(alif) = &self.head {
            alif.init(store);
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.deconv.forward(f, x)?;
        match &self.head {
            DecoderHead::Spiking(alif) => alif.forward(f, y),
            DecoderHead::Readout { zeta } => {
                let steps = f.steps;
                f.tape.membrane_readout(y, *zeta, steps)
            }
        }
    }
}

/// Grouped transform: Conv1×1 → BN → DWConv3×3 → Conv1×1 → BN.
#[derive(Clone, Debug)]
pub struct GroupTrans {
    pub pw1: Conv,
    pub bn1: BatchNorm,
    pub dw: Conv,
    pub pw2: Conv,
    pub bn2: BatchNorm,
}

impl GroupTrans {
    /// `hidden` is the width between the two pointwise convolutions. All
    /// three convolutions are costed with `rate`.
    pub fn new(prefix: &str, channels: usize, hidden: usize, rate: RateSource) -> Self {
        let dw_spec = LayerSpec {
            kind: LayerKind::DwConv,
            ..LayerSpec::conv(hidden, hidden, 3, 1, 1)
        };
        Self {
            pw1: Conv::new(format!("{prefix}.pw1"), LayerSpec::conv(channels, hidden, 1, 1, 0), false, rate.clone()),
            bn1: BatchNorm::new(format!("{prefix}.bn1"), hidden),
            dw: Conv::new(format!("{prefix}.dw"), dw_spec, false, rate.clone()),
            pw2: Conv::new(format!("{prefix}.pw2"), LayerSpec::conv(hidden, channels, 1, 1, 0), false, rate),
            bn2: BatchNorm::new(format!("{prefix}.bn2"), channels),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.pw1.init(store, rng);
        self.bn1.init(store);
        self.dw.init(store, rng);
        self.pw2.init(store, rng);
        self.bn2.init(store);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let x = self.pw1.forward(f, x)?;
        let x = self.bn1.forward(f, x)?;
        let x = self.dw.forward(f, x)?;
        let x = self.pw2.forward(f, x)?;
        self.bn2.forward(f, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_for(init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng)) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init(&mut store, &mut rng);
        store
    }

    fn random_spikes(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
    }

    #[test]
    fn spike_code_shape_and_binarity() {
        let coder = SpikeCoder::new("coder", 3, 16, NeuronConfig::default());
        let store = store_for(|s, r| coder.init(s, r));
        let (t, h, w) = (3, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = Tensor::from_fn(&[t, 3, h, w], |_| rng.gen::<f32>());
        let mut f = Forward::new(&store, BatchNormMode::Train, t);
        let x = f.tape.constant(frames);
        let s = coder.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(s), &[t, 16, h / 2, w / 2]);
        assert!(f.tape.value(s).is_binary());

        let mut f = Forward::new(&store, BatchNormMode::Train, t);
        let x = f.tape.constant(Tensor::zeros(&[t, 3, h, w]));
        let s = coder.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.value(s).sum(), 0.0);

        let mut f = Forward::new(&store, BatchNormMode::Train, t);
        let x = f.tape.constant(Tensor::zeros(&[t, 3, 7, 8]));
        assert!(coder.forward(&mut f, x).is_err());
    }

    #[test]
    fn encoder_stages_halve_and_double() {
        let cfg = NeuronConfig::default();
        let e1 = EncoderStage::new("e1", 16, 32, cfg);
        let e2 = EncoderStage::new("e2", 32, 64, cfg);
        let store = store_for(|s, r| {
            e1.init(s, r);
            e2.init(s, r);
        });
        let t = 2;
        let mut f = Forward::new(&store, BatchNormMode::Train, t);
        let x = f.tape.constant(random_spikes(&[t, 16, 16, 16], 3));
        let a = e1.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(a), &[t, 32, 8, 8]);
        assert!(f.tape.value(a).is_binary());
        let b = e2.forward(&mut f, a).unwrap();
        assert_eq!(f.tape.shape(b), &[t, 64, 4, 4]);
        assert!(f.tape.value(b).is_binary());

        let z = f.tape.constant(Tensor::zeros(&[t, 16, 16, 16]));
        let a = e1.forward(&mut f, z).unwrap();
        assert_eq!(f.tape.value(a).sum(), 0.0);
    }

    #[test]
    fn decoder_stages() {
        let cfg = NeuronConfig::default();
        let d1 = DecoderStage::spiking("d1", 128, 32, cfg);
        let d3 = DecoderStage::readout("d3", 48, 3, cfg.zeta, vec![]);
        let store = store_for(|s, r| {
            d1.init(s, r);
            d3.init(s, r);
        });
        let t = 2;
        let mut f = Forward::new(&store, BatchNormMode::Train, t);
        let x = f.tape.constant(random_spikes(&[t, 128, 4, 4], 5));
        let y = d1.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(y), &[t, 32, 8, 8]);
        assert!(f.tape.value(y).is_binary());

        let x = f.tape.constant(random_spikes(&[t, 48, 8, 8], 6));
        let k = d3.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(k), &[t, 3, 16, 16]);
        assert!(!f.tape.value(k).is_binary());

        let z = f.tape.constant(Tensor::zeros(&[t, 48, 8, 8]));
        let k = d3.forward(&mut f, z).unwrap();
        assert_eq!(f.tape.value(k).max_abs(), 0.0);

        let bad = f.tape.constant(Tensor::zeros(&[t, 40, 8, 8]));
        assert!(d3.forward(&mut f, bad).is_err());
    }

    #[test]
    fn group_trans_preserves_shape_and_zero() {
        let g = GroupTrans::new("g", 64, 128, RateSource::Input(vec![]));
        let store = store_for(|s, r| g.init(s, r));
        let t = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::from_fn(&[t, 64, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let mut f = Forward::new(&store, BatchNormMode::Train, t);
        let x = f.tape.constant(input.clone());
        let y = g.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(y), f.tape.shape(x));

        let z = f.tape.constant(Tensor::zeros(&[t, 64, 4, 4]));
        let y = g.forward(&mut f, z).unwrap();
        assert_eq!(f.tape.value(y).max_abs(), 0.0);

        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut f = Forward::new(&store, BatchNormMode::Eval, t);
            let x = f.tape.constant(input.clone());
            let y = g.forward(&mut f, x).unwrap();
            outs.push(f.tape.value(y).clone());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn layer_spec_shape_arithmetic() {
        let c = LayerSpec::conv(3, 16, 3, 2, 1);
        assert_eq!(c.output_hw(64, 64).unwrap(), (32, 32));
        let d = Deconv::upsample2("d", 4, 4, RateSource::Input(vec![])).spec;
        assert_eq!(d.output_hw(8, 8).unwrap(), (16, 16));
        // two encoder halvings + coder halving, then three ×2 decodes
        let (mut h, mut w) = (40usize, 24usize);
        for _ in 0..3 {
            h /= 2;
            w /= 2;
        }
        for _ in 0..3 {
            (h, w) = d.output_hw(h, w).unwrap();
        }
        assert_eq!((h, w), (40, 24));
    }
}
