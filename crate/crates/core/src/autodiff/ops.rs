use super::kernels::{self, ConvGeom, DeconvGeom, Window};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::surrogate_grad_scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Whether batch normalisation uses batch statistics (and updates the
/// running estimates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running mean / variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MeanLeading {
        x: Var,
        groups: usize,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: DeconvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
        mode: BatchNormMode,
    },
    Spike {
        v: Var,
        th: Var,
        lambda: f32,
    },
    Membrane {
        v_prev: Var,
        x: Var,
        s_prev: Tensor,
        th: Var,
        zeta: f32,
    },
    LifSequence {
        x: Var,
        th: Var,
        zeta: f32,
        lambda: f32,
        steps: usize,
        membrane: Tensor,
    },
    Readout {
        x: Var,
        zeta: f32,
        steps: usize,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sum(a) | Mean(a) | Reshape(a) => vec![*a],
            MeanLeading { x, .. } | Permute { x, .. } | MaxPool { x, .. } | Readout { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            Matmul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, b, .. } | ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Spike { v, th, .. } => vec![*v, *th],
            Membrane { v_prev, x, th, .. } => vec![*v_prev, *x, *th],
            LifSequence { x, th, .. } => vec![*x, *th],
        }
    }

    pub fn backward(&self, tape: &Tape, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        use Op::*;
        let val = |v: &Var| tape.value(*v);
        Ok(match self {
            Leaf => vec![],
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Mul(a, b) => vec![
                (*a, g.zip_map(val(b), |g, b| g * b)?),
                (*b, g.zip_map(val(a), |g, a| g * a)?),
            ],
            Div(a, b) => {
                let gb = Tensor::from_fn(g.shape(), |i| {
                    let (gv, av, bv) = (g.data()[i], val(a).data()[i], val(b).data()[i]);
                    -gv * av / (bv * bv)
                });
                vec![(*a, g.zip_map(val(b), |g, b| g / b)?), (*b, gb)]
            }
            Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            AddScalar(a) => vec![(*a, g.clone())],
            Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Mean(a) => {
                let n = val(a).numel() as f32;
                vec![(*a, Tensor::full(val(a).shape(), g.item() / n))]
            }
            MeanLeading { x, groups } => {
                let inner = g.numel();
                let scale = 1.0 / *groups as f32;
                let data: Vec<f32> = (0..*groups)
                    .flat_map(|_| g.data().iter().map(move |v| v * scale))
                    .collect();
                debug_assert_eq!(data.len(), inner * groups);
                vec![(*x, Tensor::new(val(x).shape().to_vec(), data)?)]
            }
            Concat { inputs, widths } => {
                let shape = g.shape();
                let total: usize = widths.iter().sum();
                let outer = shape[0];
                let inner: usize = shape[2..].iter().product();
                let mut grads: Vec<Vec<f32>> = widths.iter().map(|w| Vec::with_capacity(outer * w * inner)).collect();
                for n in 0..outer {
                    let mut offset = 0;
                    for (i, w) in widths.iter().enumerate() {
                        let start = (n * total + offset) * inner;
                        grads[i].extend_from_slice(&g.data()[start..start + w * inner]);
                        offset += w;
                    }
                }
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(v, d)| Ok((*v, Tensor::new(val(v).shape().to_vec(), d)?)))
                    .collect::<Result<Vec<_>>>()?
            }
            Reshape(a) => vec![(*a, g.clone().reshape(val(a).shape())?)],
            Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute(g, &inverse))]
            }
            Matmul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let mut ga = vec![0.0f32; batch * m * k];
                let mut gb = vec![0.0f32; batch * k * n];
                let (av, bv) = (val(a).data(), val(b).data());
                for i in 0..*batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    kernels::gemm(gi, (m, n), false, &bv[i * k * n..(i + 1) * k * n], (k, n), true, &mut ga[i * m * k..(i + 1) * m * k], false);
                    kernels::gemm(&av[i * m * k..(i + 1) * m * k], (m, k), true, gi, (m, n), false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
                vec![
                    (*a, Tensor::new(val(a).shape().to_vec(), ga)?),
                    (*b, Tensor::new(val(b).shape().to_vec(), gb)?),
                ]
            }
            Conv2d { x, w, b, geom } => {
                let need_dx = tape.requires_grad(*x);
                let (dx, dw, db) = kernels::conv2d_backward(geom, val(x).data(), val(w).data(), g.data(), need_dx);
                let mut res = vec![(*w, Tensor::new(val(w).shape().to_vec(), dw)?)];
                if let Some(dx) = dx {
                    res.push((*x, Tensor::new(val(x).shape().to_vec(), dx)?));
                }
                if let Some(b) = b {
                    res.push((*b, Tensor::new(val(b).shape().to_vec(), db)?));
                }
                res
            }
            ConvTranspose2d { x, w, b, geom } => {
                let need_dx = tape.requires_grad(*x);
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(geom, val(x).data(), val(w).data(), g.data(), need_dx);
                let mut res = vec![(*w, Tensor::new(val(w).shape().to_vec(), dw)?)];
                if let Some(dx) = dx {
                    res.push((*x, Tensor::new(val(x).shape().to_vec(), dx)?));
                }
                if let Some(b) = b {
                    res.push((*b, Tensor::new(val(b).shape().to_vec(), db)?));
                }
                res
            }
            MaxPool { x, argmax } => {
                let mut dx = vec![0.0f32; val(x).numel()];
                for (gv, &idx) in g.data().iter().zip(argmax) {
                    dx[idx as usize] += gv;
                }
                vec![(*x, Tensor::new(val(x).shape().to_vec(), dx)?)]
            }
            BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let shape = val(x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f32;
                let gam = val(gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += g.data()[i] * xhat.data()[i];
                            dbeta[ch] += g.data()[i];
                        }
                    }
                }
                let mut dx = vec![0.0f32; val(x).numel()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            let dxhat = g.data()[i] * gam[ch];
                            dx[i] = match mode {
                                BatchNormMode::Eval => dxhat * inv_std[ch],
                                // dxhat sums: Σ dxhat = γ Σ g, Σ dxhat·x̂ = γ Σ g·x̂
                                BatchNormMode::Train => {
                                    inv_std[ch] / m
                                        * (m * dxhat - gam[ch] * dbeta[ch] - xhat.data()[i] * gam[ch] * dgamma[ch])
                                }
                            };
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(shape.to_vec(), dx)?),
                    (*gamma, Tensor::new(val(gamma).shape().to_vec(), dgamma)?),
                    (*beta, Tensor::new(val(beta).shape().to_vec(), dbeta)?),
                ]
            }
            Spike { v, th, lambda } => {
                let theta = val(th).item();
                let dv = Tensor::from_fn(g.shape(), |i| {
                    g.data()[i] * surrogate_grad_scalar(val(v).data()[i], theta, *lambda)
                });
                let dth = -dv.sum();
                vec![(*v, dv), (*th, Tensor::new(val(th).shape().to_vec(), vec![dth])?)]
            }
            Membrane {
                v_prev,
                x,
                s_prev,
                th,
                zeta,
            } => {
                let dth: f32 = -g.data().iter().zip(s_prev.data()).map(|(g, s)| g * s).sum::<f32>();
                vec![
                    (*v_prev, g.map(|v| v * zeta)),
                    (*x, g.clone()),
                    (*th, Tensor::new(val(th).shape().to_vec(), vec![dth])?),
                ]
            }
            LifSequence {
                x,
                th,
                zeta,
                lambda,
                steps,
                membrane,
            } => {
                let theta = val(th).item();
                let slab = g.numel() / steps;
                let mut dx = vec![0.0f32; g.numel()];
                let mut dv_next = vec![0.0f32; slab];
                let mut dth = 0.0f32;
                for t in (0..*steps).rev() {
                    let range = t * slab..(t + 1) * slab;
                    let gs = &g.data()[range.clone()];
                    let vs = &membrane.data()[range.clone()];
                    let dxs = &mut dx[range];
                    for i in 0..slab {
                        let sg = gs[i] * surrogate_grad_scalar(vs[i], theta, *lambda);
                        let dv = sg + zeta * dv_next[i];
                        dxs[i] = dv;
                        dth -= sg;
                        if t > 0 {
                            // reset term −S[t−1]·θ, spike treated as a constant
                            dth -= dv * out.data()[(t - 1) * slab + i];
                        }
                        dv_next[i] = dv;
                    }
                }
                vec![
                    (*x, Tensor::new(val(x).shape().to_vec(), dx)?),
                    (*th, Tensor::new(val(th).shape().to_vec(), vec![dth])?),
                ]
            }
            Readout { x, zeta, steps } => {
                let slab = g.numel() / steps;
                let mut dx = vec![0.0f32; g.numel()];
                let mut dv_next = vec![0.0f32; slab];
                for t in (0..*steps).rev() {
                    for i in 0..slab {
                        let dv = g.data()[t * slab + i] + zeta * dv_next[i];
                        dx[t * slab + i] = dv;
                        dv_next[i] = dv;
                    }
                }
                vec![(*x, Tensor::new(val(x).shape().to_vec(), dx)?)]
            }
        })
    }
}

fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.numel() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

fn scalar_param(tape: &Tape, op: &'static str, v: Var) -> Result<f32> {
    if tape.value(v).numel() != 1 {
        return Err(Error::shape(op, format!("threshold must be a scalar, got {:?}", tape.shape(v))));
    }
    Ok(tape.value(v).item())
}

fn check_steps(tape: &Tape, op: &'static str, x: Var, steps: usize) -> Result<()> {
    let shape = tape.shape(x);
    if steps == 0 || shape.is_empty() || !shape[0].is_multiple_of(steps) {
        return Err(Error::shape(
            op,
            format!("leading dim of {:?} is not a multiple of {} timesteps", shape, steps),
        ));
    }
    Ok(())
}

/// Differentiable operations.
impl Tape {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        same_shape(self, name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        self.push("scale", value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push("mean", value, Op::Mean(a))
    }

    /// Averages a `[groups·B, …]` tensor over its `groups` leading blocks,
    /// giving `[B, …]`. Used to aggregate a time-major sequence over T.
    pub fn mean_leading(&mut self, x: Var, groups: usize) -> Result<Var> {
        check_steps(self, "mean_leading", x, groups)?;
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        shape[0] /= groups;
        let inner = v.numel() / groups;
        let mut out = vec![0.0f32; inner];
        for gidx in 0..groups {
            for (o, x) in out.iter_mut().zip(&v.data()[gidx * inner..(gidx + 1) * inner]) {
                *o += x;
            }
        }
        let scale = 1.0 / groups as f32;
        out.iter_mut().for_each(|o| *o *= scale);
        self.push("mean_leading", Tensor::new(shape, out)?, Op::MeanLeading { x, groups })
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat", "inputs need a channel axis"));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(first[0] * total * inner);
        for n in 0..first[0] {
            for (&v, &w) in inputs.iter().zip(&widths) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[n * w * inner..(n + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("bad axes {:?} for rank {}", axes, rank)));
        }
        let value = permute(self.value(x), axes);
        self.push("permute", value, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(x, &axes)
    }

    /// Matrix product over the last two axes; a leading batch axis is
    /// allowed when both operands share it.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let mut out = vec![0.0f32; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                &av[i * m * k..(i + 1) * m * k],
                (m, k),
                false,
                &bv[i * k * n..(i + 1) * k * n],
                (k, n),
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push("matmul", Tensor::new(shape, out)?, Op::Matmul { a, b, batch, m, k, n })
    }

    /// Cross-correlation of `x: [N, C_in, H, W]` with `w: [C_out, C_in/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |d: String| Error::shape("conv2d", d);
        let ([n, c_in, h, wd], [c_out, cin_g, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(bad(format!("input {:?}, kernel {:?}", xs, ws)));
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in / groups != *cin_g || kh != kw {
            return Err(bad(format!("input {:?}, kernel {:?}, groups {}", xs, ws, groups)));
        }
        if let Some(b) = b {
            if self.shape(b) != [*c_out] {
                return Err(bad(format!("bias {:?} for {} outputs", self.shape(b), c_out)));
            }
        }
        let window = Window::new(*cin_g, *h, *wd, *kh, stride, pad)
            .ok_or_else(|| bad(format!("kernel {} stride {} pad {} on {}x{}", kh, stride, pad, h, wd)))?;
        let geom = ConvGeom {
            batch: *n,
            c_in: *c_in,
            c_out: *c_out,
            groups,
            window,
        };
        let data = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::new(vec![*n, *c_out, window.out_h, window.out_w], data)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution with kernel `w: [C_in, C_out, k, k]`; output
    /// side is `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |d: String| Error::shape("conv_transpose2d", d);
        let ([n, c_in, h, wd], [wc_in, c_out, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(bad(format!("input {:?}, kernel {:?}", xs, ws)));
        };
        if c_in != wc_in || kh != kw || stride == 0 {
            return Err(bad(format!("input {:?}, kernel {:?}", xs, ws)));
        }
        if let Some(b) = b {
            if self.shape(b) != [*c_out] {
                return Err(bad(format!("bias {:?} for {} outputs", self.shape(b), c_out)));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        if oh < 2 * pad + 1 || ow < 2 * pad + 1 {
            return Err(bad(format!("padding {} too large", pad)));
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let window = Window::new(*c_out, oh, ow, *kh, stride, pad).filter(|w| w.out_h == *h && w.out_w == *wd);
        let window = window.ok_or_else(|| bad(format!("no adjoint geometry for {:?}", xs)))?;
        let geom = DeconvGeom {
            batch: *n,
            c_in: *c_in,
            c_out: *c_out,
            window,
        };
        let data = kernels::conv_transpose2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::new(vec![*n, *c_out, oh, ow], data)?;
        self.push("conv_transpose2d", value, Op::ConvTranspose2d { x, w, b, geom })
    }

    /// 2×2 max pooling with stride 2 over the trailing two axes.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("maxpool2d", format!("{:?}", shape)));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("maxpool2d", format!("odd spatial dims {}x{}", h, w)));
        }
        let planes = self.value(x).numel() / (h * w);
        let (data, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), planes, h, w);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = h / 2;
        out_shape[r - 1] = w / 2;
        self.push("maxpool2d", Tensor::new(out_shape, data)?, Op::MaxPool { x, argmax })
    }

    /// Batch normalisation over axis 1 of `[N, C, …]`. In training mode the
    /// running statistics are updated in place.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: BatchNormMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", format!("{:?}", shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm", format!("{} channels vs parameter length {:?}", c, self.shape(gamma))));
        }
        let inner: usize = shape[2..].iter().product();
        let m = n * inner;
        let xv = self.value(x).data();
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
            BatchNormMode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for s in 0..n {
                    for (ch, mu) in mean.iter_mut().enumerate() {
                        *mu += xv[(s * c + ch) * inner..(s * c + ch + 1) * inner].iter().sum::<f32>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f32);
                for s in 0..n {
                    for (ch, va) in var.iter_mut().enumerate() {
                        *va += xv[(s * c + ch) * inner..(s * c + ch + 1) * inner]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f32>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f32);
                let unbias = if m > 1 { m as f32 / (m - 1) as f32 } else { 1.0 };
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gam[ch] * xhat[i] + bet[ch];
                }
            }
        }
        let xhat = Tensor::new(shape.clone(), xhat)?;
        self.push(
            "batchnorm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
        )
    }

    /// Heaviside spike `S = Θ(V − V_th)`; backward uses the fast-sigmoid
    /// surrogate derivative.
    pub fn spike(&mut self, v: Var, th: Var, lambda: f32) -> Result<Var> {
        let theta = scalar_param(self, "spike", th)?;
        let value = self.value(v).map(|x| if x >= theta { 1.0 } else { 0.0 });
        self.push("spike", value, Op::Spike { v, th, lambda })
    }

    /// One membrane update `V[t] = ζ·V[t−1] + X[t] − S[t−1]·V_th`, with
    /// `S[t−1]` held constant.
    pub fn membrane(&mut self, v_prev: Var, x: Var, s_prev: &Tensor, th: Var, zeta: f32) -> Result<Var> {
        same_shape(self, "membrane", v_prev, x)?;
        if s_prev.shape() != self.shape(x) {
            return Err(Error::shape("membrane", "previous spikes do not match input shape"));
        }
        let theta = scalar_param(self, "membrane", th)?;
        let value = Tensor::from_fn(self.shape(x), |i| {
            zeta * self.value(v_prev).data()[i] + self.value(x).data()[i] - s_prev.data()[i] * theta
        });
        self.push(
            "membrane",
            value,
            Op::Membrane {
                v_prev,
                x,
                s_prev: s_prev.clone(),
                th,
                zeta,
            },
        )
    }

    /// Whole-sequence LIF layer over a time-major input `[T·B, …]`; returns
    /// the spike train. Gradients flow back through all timesteps.
    pub fn lif_sequence(&mut self, x: Var, th: Var, zeta: f32, lambda: f32, steps: usize) -> Result<Var> {
        check_steps(self, "lif", x, steps)?;
        let theta = scalar_param(self, "lif", th)?;
        let xv = self.value(x);
        let slab = xv.numel() / steps;
        let mut membrane = vec![0.0f32; xv.numel()];
        let mut spikes = vec![0.0f32; xv.numel()];
        let mut v = vec![0.0f32; slab];
        let mut s_prev = vec![0.0f32; slab];
        for t in 0..steps {
            for i in 0..slab {
                let idx = t * slab + i;
                v[i] = zeta * v[i] + xv.data()[idx] - s_prev[i] * theta;
                let s = if v[i] >= theta { 1.0 } else { 0.0 };
                membrane[idx] = v[i];
                spikes[idx] = s;
                s_prev[i] = s;
            }
        }
        let shape = xv.shape().to_vec();
        let membrane = Tensor::new(shape.clone(), membrane)?;
        if !membrane.all_finite() {
            return Err(Error::NonFinite { op: "lif" });
        }
        self.push(
            "lif",
            Tensor::new(shape, spikes)?,
            Op::LifSequence {
                x,
                th,
                zeta,
                lambda,
                steps,
                membrane,
            },
        )
    }

    /// Non-resetting integrator `V[t] = ζ·V[t−1] + X[t]` over `[T·B, …]`;
    /// returns the membrane potential at every step.
    pub fn membrane_readout(&mut self, x: Var, zeta: f32, steps: usize) -> Result<Var> {
        check_steps(self, "readout", x, steps)?;
        let xv = self.value(x);
        let slab = xv.numel() / steps;
        let mut out = vec![0.0f32; xv.numel()];
        for t in 0..steps {
            for i in 0..slab {
                let prev = if t > 0 { out[(t - 1) * slab + i] } else { 0.0 };
                out[t * slab + i] = zeta * prev + xv.data()[t * slab + i];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("readout", value, Op::Readout { x, zeta, steps })
    }
}
