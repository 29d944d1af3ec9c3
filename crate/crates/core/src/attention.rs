//! Spike-based self-attention without scaling or softmax, and the spiking
//! transformer block built on it.
//!
//! Tokens are the spatial positions of a `[T·B, D, h, w]` map: `N = h·w`,
//! embedding width `D`. Attention is evaluated per timestep:
//! `ALIF(Q · (Kᵀ · V))`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::energy::{RateSource, SynapticKind, SynapticOp};
use crate::error::{Error, Result};
use crate::layers::{Alif, BatchNorm, Conv, Forward, GroupTrans, LayerSpec};
use crate::neuron::NeuronConfig;
use crate::params::ParamStore;

/// `[TB, D, h, w]` → `[TB·heads, N, D/heads]`.
pub fn to_tokens(f: &mut Forward, x: Var, heads: usize) -> Result<Var> {
    let s = f.tape.shape(x).to_vec();
    let &[tb, d, h, w] = s.as_slice() else {
        return Err(Error::shape("to_tokens", format!("expected rank 4, got {:?}", s)));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("to_tokens", format!("{d} channels do not split into {heads} heads")));
    }
    let n = h * w;
    let flat = f.tape.reshape(x, &[tb, d, n])?;
    let tokens = f.tape.permute(flat, &[0, 2, 1])?;
    if heads == 1 {
        return Ok(tokens);
    }
    let dh = d / heads;
    let split = f.tape.reshape(tokens, &[tb, n, heads, dh])?;
    let grouped = f.tape.permute(split, &[0, 2, 1, 3])?;
    f.tape.reshape(grouped, &[tb * heads, n, dh])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(f: &mut Forward, t: Var, heads: usize, h: usize, w: usize) -> Result<Var> {
    let s = f.tape.shape(t).to_vec();
    let &[tbh, n, dh] = s.as_slice() else {
        return Err(Error::shape("from_tokens", format!("expected rank 3, got {:?}", s)));
    };
    if n != h * w || heads == 0 || tbh % heads != 0 {
        return Err(Error::shape("from_tokens", format!("{:?} does not match {h}x{w} with {heads} heads", s)));
    }
    let tb = tbh / heads;
    let d = dh * heads;
    let merged = if heads == 1 {
        t
    } else {
        let split = f.tape.reshape(t, &[tb, heads, n, dh])?;
        let p = f.tape.permute(split, &[0, 2, 1, 3])?;
        f.tape.reshape(p, &[tb, n, d])?
    };
    let chans = f.tape.permute(merged, &[0, 2, 1])?;
    f.tape.reshape(chans, &[tb, d, h, w])
}

/// `Q · (Kᵀ · V)` on `[G, N, Dh]` operands, no scale, no softmax.
pub fn attention_scores(f: &mut Forward, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (f.tape.shape(q).to_vec(), f.tape.shape(k).to_vec(), f.tape.shape(v).to_vec());
    if sq.len() != 3 || sq != sk || sk != sv {
        return Err(Error::shape("asbsa", format!("Q {:?}, K {:?}, V {:?}", sq, sk, sv)));
    }
    let kt = f.tape.transpose(k)?;
    let kv = f.tape.matmul(kt, v)?;
    f.tape.matmul(q, kv)
}

/// One `ALIF → G^Trans → ALIF` pipeline producing Q, K or V spikes.
#[derive(Clone, Debug)]
pub struct SpikeProjection {
    pub alif_in: Alif,
    pub trans: GroupTrans,
    pub alif_out: Alif,
}

impl SpikeProjection {
    fn new(prefix: &str, dim: usize, hidden: usize, cfg: NeuronConfig) -> Self {
        let alif_out = Alif::new(format!("{prefix}.alif_out"), cfg);
        Self {
            alif_in: Alif::new(format!("{prefix}.alif_in"), cfg),
            trans: GroupTrans::new(
                &format!("{prefix}.trans"),
                dim,
                hidden,
                RateSource::Output(alif_out.name.clone()),
            ),
            alif_out,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.alif_in.init(store);
        self.trans.init(store, rng);
        self.alif_out.init(store);
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let s = self.alif_in.forward(f, x)?;
        let y = self.trans.forward(f, s)?;
        self.alif_out.forward(f, y)
    }
}

/// Residual attention sub-block followed by a residual spiking MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub q: SpikeProjection,
    pub k: SpikeProjection,
    pub v: SpikeProjection,
    pub attn_alif: Alif,
    pub out_trans: GroupTrans,
    pub mlp_alif: Alif,
    pub mlp_conv: Conv,
    pub mlp_bn: BatchNorm,
}

impl TransformerBlock {
    pub fn new(prefix: &str, dim: usize, hidden: usize, heads: usize, cfg: NeuronConfig) -> Self {
        let attn_alif = Alif::new(format!("{prefix}.attn.alif"), cfg);
        let mlp_alif = Alif::new(format!("{prefix}.mlp.alif"), cfg);
        Self {
            name: prefix.to_string(),
            dim,
            heads,
            q: SpikeProjection::new(&format!("{prefix}.q"), dim, hidden, cfg),
            k: SpikeProjection::new(&format!("{prefix}.k"), dim, hidden, cfg),
            v: SpikeProjection::new(&format!("{prefix}.v"), dim, hidden, cfg),
            out_trans: GroupTrans::new(
                &format!("{prefix}.attn.out"),
                dim,
                hidden,
                RateSource::Input(vec![attn_alif.name.clone()]),
            ),
            attn_alif,
            mlp_conv: Conv::new(
                format!("{prefix}.mlp.conv"),
                LayerSpec::conv(dim, dim, 1, 1, 0),
                false,
                RateSource::Input(vec![mlp_alif.name.clone()]),
            ),
            mlp_alif,
            mlp_bn: BatchNorm::new(format!("{prefix}.mlp.bn"), dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.q.init(store, rng);
        self.k.init(store, rng);
        self.v.init(store, rng);
        self.attn_alif.init(store);
        self.out_trans.init(store, rng);
        self.mlp_alif.init(store);
        self.mlp_conv.init(store, rng);
        self.mlp_bn.init(store);
    }

    /// Q, K and V spike maps, each `[T·B, D, h, w]`.
    pub fn make_qkv(&self, f: &mut Forward, x: Var) -> Result<(Var, Var, Var)> {
        let s = f.tape.shape(x);
        if s.len() != 4 || s[1] != self.dim {
            return Err(Error::shape(
                "transformer",
                format!("{} expects {} channels, got {:?}", self.name, self.dim, s),
            ));
        }
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, x)?;
        let v = self.v.forward(f, x)?;
        Ok((q, k, v))
    }

    /// `ALIF(Q(KᵀV))` on spike maps; returns spikes in map layout.
    pub fn asbsa(&self, f: &mut Forward, q: Var, k: Var, v: Var) -> Result<Var> {
        let s = f.tape.shape(q).to_vec();
        let (h, w) = (s[2], s[3]);
        let qt = to_tokens(f, q, self.heads)?;
        let kt = to_tokens(f, k, self.heads)?;
        let vt = to_tokens(f, v, self.heads)?;
        let scores = attention_scores(f, qt, kt, vt)?;
        if f.tracing() {
            let n = (h * w) as u64;
            let dh = (self.dim / self.heads) as u64;
            let flops = n * self.dim as u64 * dh;
            f.record_op(|| SynapticOp {
                name: format!("{}.attn.kv", self.name),
                kind: SynapticKind::MatMul,
                flops,
                rate: RateSource::Input(vec![self.k.alif_out.name.clone()]),
                direct_coded: false,
            });
            f.record_op(|| SynapticOp {
                name: format!("{}.attn.qkv", self.name),
                kind: SynapticKind::MatMul,
                flops,
                rate: RateSource::Input(vec![self.q.alif_out.name.clone()]),
                direct_coded: false,
            });
        }
        let map = from_tokens(f, scores, self.heads, h, w)?;
        self.attn_alif.forward(f, map)
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (q, k, v) = self.make_qkv(f, x)?;
        let a = self.asbsa(f, q, k, v)?;
        let a = self.out_trans.forward(f, a)?;
        let x_mlp = f.tape.add(a, x)?;
        let s = self.mlp_alif.forward(f, x_mlp)?;
        let m = self.mlp_conv.forward(f, s)?;
        let m = self.mlp_bn.forward(f, m)?;
        f.tape.add(x_mlp, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BatchNormMode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn block(heads: usize) -> (TransformerBlock, ParamStore) {
        let b = TransformerBlock::new("blk", 8, 16, heads, NeuronConfig::default());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.init(&mut store, &mut rng);
        (b, store)
    }

    #[test]
    fn hand_product() {
        let store = ParamStore::new();
        let mut f = Forward::new(&store, BatchNormMode::Eval, 1);
        let q = f.tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap());
        let k = f.tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let v = f.tape.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
        let out = attention_scores(&mut f, q, k, v).unwrap();
        assert_eq!(f.tape.value(out).data(), &[0.0, 1.0]);
    }

    #[test]
    fn token_layout_round_trip() {
        let store = ParamStore::new();
        for heads in [1, 2, 4] {
            let mut f = Forward::new(&store, BatchNormMode::Eval, 1);
            let x = f.tape.constant(Tensor::from_fn(&[2, 8, 3, 2], |i| i as f32));
            let t = to_tokens(&mut f, x, heads).unwrap();
            assert_eq!(f.tape.shape(t), &[2 * heads, 6, 8 / heads]);
            let back = from_tokens(&mut f, t, heads, 3, 2).unwrap();
            assert_eq!(f.tape.value(back), f.tape.value(x));
        }
    }

    #[test]
    fn qkv_binary_and_distinct() {
        let (b, store) = block(1);
        let t = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = Tensor::from_fn(&[t, 8, 4, 4], |_| rng.gen_range(0.0..2.0));
        let mut f = Forward::new(&store, BatchNormMode::Train, t);
        let x = f.tape.constant(input);
        let (q, k, v) = b.make_qkv(&mut f, x).unwrap();
        for s in [q, k, v] {
            assert!(f.tape.value(s).is_binary());
            assert_eq!(f.tape.shape(s), &[t, 8, 4, 4]);
        }
        assert!(f.tape.value(q) != f.tape.value(k) || f.tape.value(k) != f.tape.value(v));

        let a = b.asbsa(&mut f, q, k, v).unwrap();
        assert!(f.tape.value(a).is_binary());
    }

    #[test]
    fn block_shape_and_quiescence() {
        for heads in [1, 2] {
            let (b, store) = block(heads);
            let t = 2;
            let mut f = Forward::new(&store, BatchNormMode::Train, t);
            let x = f.tape.constant(Tensor::zeros(&[t, 8, 4, 4]));
            let y = b.forward(&mut f, x).unwrap();
            assert_eq!(f.tape.shape(y), &[t, 8, 4, 4]);
            assert_eq!(f.tape.value(y).max_abs(), 0.0);
        }
    }
}
