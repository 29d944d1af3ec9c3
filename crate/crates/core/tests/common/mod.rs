//! Helpers shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snn_dehaze::autodiff::{Tape, Var};
use snn_dehaze::{Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// A smooth synthetic scene and a hazier, brighter copy of it.
pub fn synthetic_pair(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let reference = Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        let (y, x) = ((p / w) as f32, (p % w) as f32);
        (0.3 + 0.3 * ((x / 9.0 + c as f32).sin() * (y / 13.0).cos())).clamp(0.0, 1.0)
    });
    let hazy = Tensor::from_fn(&[1, 3, h, w], |i| 0.6 * reference.data()[i] + 0.3 + 0.02 * r.gen::<f32>());
    (hazy, reference)
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)` of two flattened vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub const FD_STEP: f32 = 1e-3;

/// Compares reverse-mode gradients of `⟨r, build(inputs)⟩` (fixed random
/// `r`) against central differences with step [`FD_STEP`]. Returns the
/// worst relative error over all inputs.
pub fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let seed = uniform(tape.shape(out), -1.0, 1.0, 99);
    let grads = tape.backward_with(out, seed.clone()).expect("backward");

    let probe = |values: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = build(&mut t, &vs).expect("forward");
        t.value(o).dot(&seed)
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = input.data()[j];
            let (xp, xm) = (x + FD_STEP, x - FD_STEP);
            plus[i].data_mut()[j] = xp;
            minus[i].data_mut()[j] = xm;
            numeric.push((probe(&plus) - probe(&minus)) / (xp as f64 - xm as f64));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Like [`fd_check`], but the differences are taken on `reference`, an
/// independent f64 implementation of the same scalar function. The tape
/// value must agree with it to `value_tol`. Used where f32 round-off in
/// the forward pass swamps a step of [`FD_STEP`].
pub fn fd_check_reference(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    reference: impl Fn(&[Vec<f64>]) -> f64,
    value_tol: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let value = tape.value(out).item() as f64;
    let expect = reference(&base);
    assert!((value - expect).abs() <= value_tol, "value {value} vs reference {expect}");
    let grads = tape.backward(out).expect("backward");
    let h = FD_STEP as f64;
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let numeric: Vec<f64> = (0..inputs[i].numel())
            .map(|j| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i][j] += h;
                minus[i][j] -= h;
                (reference(&plus) - reference(&minus)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// f64 reference losses on planar `[C, H, W]` data.
pub mod reference {
    pub fn mse(y: &[f64], z: &[f64]) -> f64 {
        y.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
    }

    pub fn ssim(y: &[f64], z: &[f64], c: usize, h: usize, w: usize) -> f64 {
        let g: Vec<f64> = snn_dehaze::loss::gaussian_1d().iter().map(|&v| v as f64).collect();
        let k = g.len();
        let (c1, c2) = (snn_dehaze::loss::SSIM_C1 as f64, snn_dehaze::loss::SSIM_C2 as f64);
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut total = 0.0;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut mx, mut mz, mut xx, mut zz, mut xz) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for r in 0..k {
                        for q in 0..k {
                            let wt = g[r] * g[q];
                            let i = ch * h * w + (oy + r) * w + ox + q;
                            mx += wt * y[i];
                            mz += wt * z[i];
                            xx += wt * y[i] * y[i];
                            zz += wt * z[i] * z[i];
                            xz += wt * y[i] * z[i];
                        }
                    }
                    let num = (2.0 * mx * mz + c1) * (2.0 * (xz - mx * mz) + c2);
                    let den = (mx * mx + mz * mz + c1) * (xx - mx * mx + zz - mz * mz + c2);
                    total += num / den;
                }
            }
        }
        total / (c * oh * ow) as f64
    }

    pub fn tv(z: &[f64], c: usize, h: usize, w: usize) -> f64 {
        let mut s = 0.0;
        for ch in 0..c {
            for i in 1..h {
                for j in 1..w {
                    let p = |a: usize, b: usize| z[ch * h * w + a * w + b];
                    s += (p(i, j) - p(i - 1, j)).powi(2) + (p(i, j) - p(i, j - 1)).powi(2);
                }
            }
        }
        s / (c * h * w) as f64
    }
}
