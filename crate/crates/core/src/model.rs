//! The full dehazing network.
//!
//! ```text
//! image ─┬─ RGB ─ coder ─┬──────────────────────── K estimator ─┐
//!        └─ LAB ─ coder ─┴─ concat ─ background light ─ B ──────┴─ Ŷ = K⊙X − K⊙B + X
//! ```
//!
//! The static image is replicated over T steps; the reconstruction is
//! averaged over T.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::TransformerBlock;
use crate::autodiff::{BatchNormMode, Var};
use crate::colorspace::{rgb_to_lab_sequence, LabScaling};
use crate::energy::RateSource;
use crate::error::{Error, Result};
use crate::layers::{Alif, Conv, Deconv, DecoderStage, EncoderStage, Forward, LayerSpec, SpikeCoder};
use crate::neuron::NeuronConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub neuron: NeuronConfig,
    /// Widths after spike coding, encoder stage 1 and encoder stage 2.
    pub channels: [usize; 3],
    pub heads: usize,
    /// Transformer blocks per branch.
    pub depth: usize,
    /// Hidden width of each grouped transform, as a multiple of its input.
    pub trans_expansion: usize,
    /// Hidden widths of the background-light estimator.
    pub bl_widths: [usize; 2],
    /// Drops the LAB branch. Set through the run configuration's ablation
    /// section.
    #[serde(skip)]
    pub rgb_only: bool,
    pub lab_scaling: LabScaling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            neuron: NeuronConfig::default(),
            channels: [16, 32, 64],
            heads: 1,
            depth: 2,
            trans_expansion: 2,
            bl_widths: [32, 16],
            rgb_only: false,
            lab_scaling: LabScaling::Centered,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        if self.channels.contains(&0) || self.bl_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.heads == 0 || !self.channels[2].is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide the embedding width {}",
                self.heads, self.channels[2]
            )));
        }
        if self.trans_expansion == 0 {
            return Err(Error::Config("trans_expansion must be at least 1".into()));
        }
        Ok(())
    }
}

/// Encoder stages and transformer blocks of one colour branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub enc1: EncoderStage,
    pub enc2: EncoderStage,
    pub blocks: Vec<TransformerBlock>,
}

impl Branch {
    fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let [c0, c1, c2] = cfg.channels;
        let hidden = c2 * cfg.trans_expansion;
        Self {
            enc1: EncoderStage::new(&format!("{prefix}.enc1"), c0, c1, cfg.neuron),
            enc2: EncoderStage::new(&format!("{prefix}.enc2"), c1, c2, cfg.neuron),
            blocks: (0..cfg.depth)
                .map(|i| TransformerBlock::new(&format!("{prefix}.block{i}"), c2, hidden, cfg.heads, cfg.neuron))
                .collect(),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.enc1.init(store, rng);
        self.enc2.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// Returns (encoder-1 output, transformer output).
    fn forward(&self, f: &mut Forward, s: Var) -> Result<(Var, Var)> {
        let e1 = self.enc1.forward(f, s)?;
        let mut x = self.enc2.forward(f, e1)?;
        for b in &self.blocks {
            x = b.forward(f, x)?;
        }
        Ok((e1, x))
    }
}

#[derive(Clone, Debug)]
pub struct KEstimator {
    pub rgb: Branch,
    pub lab: Option<Branch>,
    pub dec1: DecoderStage,
    pub dec2: DecoderStage,
    pub dec3: DecoderStage,
}

impl KEstimator {
    fn new(cfg: &ModelConfig, rgb_coder: &str, lab_coder: Option<&str>) -> Self {
        let [c0, c1, c2] = cfg.channels;
        let branches = if cfg.rgb_only { 1 } else { 2 };
        let dec1 = DecoderStage::spiking("k_estimator.dec1", branches * c2, c1, cfg.neuron);
        let dec2 = DecoderStage::spiking("k_estimator.dec2", c1 + branches * c1, c0, cfg.neuron);
        let mut feeders = vec![];
        if let crate::layers::DecoderHead::Spiking(a) = &dec2.head {
            feeders.push(a.name.clone());
        }
        feeders.push(format!("{rgb_coder}.alif"));
        if let Some(lab) = lab_coder {
            feeders.push(format!("{lab}.alif"));
        }
        let dec3 = DecoderStage::readout("k_estimator.dec3", c0 + branches * c0, 3, cfg.neuron.zeta, feeders);
        Self {
            rgb: Branch::new("k_estimator.rgb", cfg),
            lab: (!cfg.rgb_only).then(|| Branch::new("k_estimator.lab", cfg)),
            dec1,
            dec2,
            dec3,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.rgb.init(store, rng);
        if let Some(lab) = &self.lab {
            lab.init(store, rng);
        }
        self.dec1.init(store, rng);
        self.dec2.init(store, rng);
        self.dec3.init(store, rng);
    }

    /// Spike-coded branches (`[T·B, c0, H/2, W/2]`) → `K: [T·B, 3, H, W]`.
    pub fn forward(&self, f: &mut Forward, s_rgb: Var, s_lab: Option<Var>) -> Result<Var> {
        let (e1_rgb, t_rgb) = self.rgb.forward(f, s_rgb)?;
        let (mut d1_in, mut e1s, mut coded) = (vec![t_rgb], vec![e1_rgb], vec![s_rgb]);
        match (&self.lab, s_lab) {
            (Some(lab), Some(s_lab)) => {
                let (e1_lab, t_lab) = lab.forward(f, s_lab)?;
                d1_in.push(t_lab);
                e1s.push(e1_lab);
                coded.push(s_lab);
            }
            (None, None) => {}
            _ => return Err(Error::shape("k_estimator", "LAB input does not match the branch configuration")),
        }
        let x = f.tape.concat(&d1_in)?;
        let d1 = self.dec1.forward(f, x)?;
        let mut parts = vec![d1];
        parts.extend(e1s);
        let x = f.tape.concat(&parts)?;
        let d2 = self.dec2.forward(f, x)?;
        let mut parts = vec![d2];
        parts.extend(coded);
        let x = f.tape.concat(&parts)?;
        self.dec3.forward(f, x)
    }
}

/// Conv → ALIF → Conv → ALIF → DeConv(×2) → membrane readout.
#[derive(Clone, Debug)]
pub struct BackgroundLight {
    pub conv1: Conv,
    pub alif1: Alif,
    pub conv2: Conv,
    pub alif2: Alif,
    pub deconv: Deconv,
    pub zeta: f32,
}

impl BackgroundLight {
    fn new(c_in: usize, cfg: &ModelConfig) -> Self {
        let [w1, w2] = cfg.bl_widths;
        let alif1 = Alif::new("bl_estimator.alif1", cfg.neuron);
        let alif2 = Alif::new("bl_estimator.alif2", cfg.neuron);
        Self {
            conv1: Conv::new(
                "bl_estimator.conv1",
                LayerSpec::conv(c_in, w1, 3, 1, 1),
                true,
                RateSource::Output(alif1.name.clone()),
            ),
            conv2: Conv::new(
                "bl_estimator.conv2",
                LayerSpec::conv(w1, w2, 3, 1, 1),
                true,
                RateSource::Output(alif2.name.clone()),
            ),
            deconv: Deconv::upsample2("bl_estimator.deconv", w2, 3, RateSource::Input(vec![alif2.name.clone()])),
            alif1,
            alif2,
            zeta: cfg.neuron.zeta,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv1.init(store, rng);
        self.alif1.init(store);
        self.conv2.init(store, rng);
        self.alif2.init(store);
        self.deconv.init(store, rng);
    }

    /// `[T·B, C, H/2, W/2]` spikes → `B: [T·B, 3, H, W]`.
    pub fn forward(&self, f: &mut Forward, x_bl: Var) -> Result<Var> {
        let x = self.conv1.forward(f, x_bl)?;
        let x = self.alif1.forward(f, x)?;
        let x = self.conv2.forward(f, x)?;
        let x = self.alif2.forward(f, x)?;
        let x = self.deconv.forward(f, x)?;
        let steps = f.steps;
        f.tape.membrane_readout(x, self.zeta, steps)
    }
}

/// `Ŷ = K⊙X − K⊙B + X`, elementwise, no clamping.
pub fn soft_reconstruct(f: &mut Forward, k: Var, b: Var, x: Var) -> Result<Var> {
    let kx = f.tape.mul(k, x)?;
    let kb = f.tape.mul(k, b)?;
    let d = f.tape.sub(kx, kb)?;
    f.tape.add(d, x)
}

/// Tensors produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    /// Time-averaged reconstruction, `[B, 3, H, W]`.
    pub y_hat: Var,
    /// Per-step reconstruction, `[T·B, 3, H, W]`.
    pub y_steps: Var,
    pub k: Var,
    pub b: Var,
    pub frames: Var,
}

#[derive(Clone, Debug)]
pub struct DehazeModel {
    pub config: ModelConfig,
    pub rgb_coder: SpikeCoder,
    pub lab_coder: Option<SpikeCoder>,
    pub k_estimator: KEstimator,
    pub bl_estimator: BackgroundLight,
}

impl DehazeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c0 = config.channels[0];
        let rgb_coder = SpikeCoder::new("rgb_coder", 3, c0, config.neuron);
        let lab_coder = (!config.rgb_only).then(|| SpikeCoder::new("lab_coder", 3, c0, config.neuron));
        let k_estimator = KEstimator::new(&config, "rgb_coder", lab_coder.as_ref().map(|_| "lab_coder"));
        let branches = if config.rgb_only { 1 } else { 2 };
        let bl_estimator = BackgroundLight::new(branches * c0, &config);
        Ok(Self {
            config,
            rgb_coder,
            lab_coder,
            k_estimator,
            bl_estimator,
        })
    }

    /// Fresh parameters: Kaiming-uniform kernels, zero biases, unit BN scale.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.rgb_coder.init(&mut store, &mut rng);
        if let Some(lab) = &self.lab_coder {
            lab.init(&mut store, &mut rng);
        }
        self.k_estimator.init(&mut store, &mut rng);
        self.bl_estimator.init(&mut store, &mut rng);
        store
    }

    /// Number of learnable scalars.
    pub fn param_count(params: &ParamStore) -> usize {
        params.count()
    }

    /// Full forward pass on `[B, 3, H, W]` (or `[3, H, W]`) images in [0, 1].
    pub fn forward(&self, f: &mut Forward, images: &Tensor) -> Result<ModelOutputs> {
        let images = validate_images(images)?;
        let steps = f.steps;
        if steps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        let rgb = replicate(&images, steps);
        let x = f.tape.constant(rgb);
        let s_rgb = self.rgb_coder.forward(f, x)?;
        let s_lab = match &self.lab_coder {
            Some(coder) => {
                let lab = rgb_to_lab_sequence(&images, self.config.lab_scaling)?;
                let xl = f.tape.constant(replicate(&lab, steps));
                Some(coder.forward(f, xl)?)
            }
            None => None,
        };
        let k = self.k_estimator.forward(f, s_rgb, s_lab)?;
        let x_bl = match s_lab {
            Some(s_lab) => f.tape.concat(&[s_rgb, s_lab])?,
            None => s_rgb,
        };
        let b = self.bl_estimator.forward(f, x_bl)?;
        let y_steps = soft_reconstruct(f, k, b, x)?;
        let y_hat = f.tape.mean_leading(y_steps, steps)?;
        Ok(ModelOutputs {
            y_hat,
            y_steps,
            k,
            b,
            frames: x,
        })
    }

    /// Evaluation-mode reconstruction, `[B, 3, H, W]`.
    pub fn infer(&self, params: &ParamStore, images: &Tensor, steps: usize) -> Result<Tensor> {
        let mut f = Forward::new(params, BatchNormMode::Eval, steps);
        let out = self.forward(&mut f, images)?;
        Ok(f.tape.value(out.y_hat).clone())
    }
}

/// Checks shape and range; promotes `[3, H, W]` to `[1, 3, H, W]`.
pub fn validate_images(images: &Tensor) -> Result<Tensor> {
    let images = match images.shape() {
        [3, _, _] => images.clone().reshape(&[1, images.dim(0), images.dim(1), images.dim(2)])?,
        [_, 3, _, _] => images.clone(),
        s => return Err(Error::shape("forward", format!("expected [B,3,H,W] images, got {:?}", s))),
    };
    let (h, w) = (images.dim(2), images.dim(3));
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::shape(
            "forward",
            format!("image size {h}x{w} is not divisible by 8; resize to a multiple of 8"),
        ));
    }
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Range(format!("pixel value {v} outside [0,1]")));
    }
    Ok(images)
}

/// `[B, …]` → time-major `[T·B, …]` with every step equal to the input.
pub fn replicate(x: &Tensor, steps: usize) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape[0] *= steps;
    let mut data = Vec::with_capacity(x.numel() * steps);
    for _ in 0..steps {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data).expect("replicated shape matches data")
}
