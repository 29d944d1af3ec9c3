//! Training objective `L = MSE + α(1 − SSIM) + β·TV`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f32 = 1.5;
pub const SSIM_C1: f32 = 0.01 * 0.01;
pub const SSIM_C2: f32 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn image_dims(tape: &Tape, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [B,C,H,W] or [C,H,W], got {:?}", s))),
    }
}

fn as_batch(tape: &mut Tape, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [c, h, w] => tape.reshape(x, &[1, c, h, w]),
        _ => Ok(x),
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    same_shape(tape, "mse", y, y_hat)?;
    let d = tape.sub(y_hat, y)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Normalised 1-D Gaussian of length [`SSIM_WINDOW`].
pub fn gaussian_1d() -> Vec<f32> {
    let half = (SSIM_WINDOW / 2) as f32;
    let g: Vec<f32> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f32 - half;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f32 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Depthwise `[C, 1, 11, 11]` Gaussian kernel.
fn gaussian_kernel(channels: usize) -> Tensor {
    let g = gaussian_1d();
    let k = SSIM_WINDOW;
    Tensor::from_fn(&[channels, 1, k, k], |i| {
        let r = (i / k) % k;
        let c = i % k;
        g[r] * g[c]
    })
}

/// Windowed SSIM averaged over valid windows, channels and batch.
pub fn ssim(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    same_shape(tape, "ssim", y, y_hat)?;
    let (_, c, h, w) = image_dims(tape, "ssim", y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let x = as_batch(tape, y)?;
    let z = as_batch(tape, y_hat)?;
    let win = tape.constant(gaussian_kernel(c));
    let blur = |tape: &mut Tape, v: Var| tape.conv2d(v, win, None, 1, 0, c);

    let mu_x = blur(tape, x)?;
    let mu_z = blur(tape, z)?;
    let xx = tape.mul(x, x)?;
    let zz = tape.mul(z, z)?;
    let xz = tape.mul(x, z)?;
    let e_xx = blur(tape, xx)?;
    let e_zz = blur(tape, zz)?;
    let e_xz = blur(tape, xz)?;

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_zz = tape.mul(mu_z, mu_z)?;
    let mu_xz = tape.mul(mu_x, mu_z)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_z = tape.sub(e_zz, mu_zz)?;
    let cov = tape.sub(e_xz, mu_xz)?;

    let a = tape.scale(mu_xz, 2.0)?;
    let a = tape.add_scalar(a, SSIM_C1)?;
    let b = tape.scale(cov, 2.0)?;
    let b = tape.add_scalar(b, SSIM_C2)?;
    let num = tape.mul(a, b)?;
    let c1 = tape.add(mu_xx, mu_zz)?;
    let c1 = tape.add_scalar(c1, SSIM_C1)?;
    let c2 = tape.add(var_x, var_z)?;
    let c2 = tape.add_scalar(c2, SSIM_C2)?;
    let den = tape.mul(c1, c2)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// Squared first differences over pixels `(i, j)` with `i, j ≥ 1`,
/// divided by `C·H·W` (and averaged over the batch).
pub fn tv(tape: &mut Tape, y_hat: Var) -> Result<Var> {
    let (b, c, h, w) = image_dims(tape, "tv", y_hat)?;
    if h < 2 || w < 2 {
        return Err(Error::shape("tv", format!("image {h}x{w} needs at least 2x2 pixels")));
    }
    let x = as_batch(tape, y_hat)?;
    // per channel: vertical then horizontal difference on each 2×2 window
    let diff = Tensor::from_fn(&[2 * c, 1, 2, 2], |i| match (i / 4) % 2 {
        0 => [0.0, -1.0, 0.0, 1.0][i % 4],
        _ => [0.0, 0.0, -1.0, 1.0][i % 4],
    });
    let k = tape.constant(diff);
    let d = tape.conv2d(x, k, None, 1, 0, c)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (b * c * h * w) as f32)
}

#[derive(Clone, Copy, Debug)]
pub struct NetLoss {
    pub total: Var,
    pub mse: Var,
    pub ssim: Var,
    pub tv: Var,
}

/// `MSE + α(1 − SSIM) + β·TV`.
pub fn net_loss(tape: &mut Tape, y: Var, y_hat: Var, w: LossWeights) -> Result<NetLoss> {
    w.validate()?;
    let m = mse(tape, y, y_hat)?;
    let s = ssim(tape, y, y_hat)?;
    let t = tv(tape, y_hat)?;
    let dis = tape.scale(s, -w.alpha)?;
    let dis = tape.add_scalar(dis, w.alpha)?;
    let reg = tape.scale(t, w.beta)?;
    let total = tape.add(m, dis)?;
    let total = tape.add(total, reg)?;
    Ok(NetLoss {
        total,
        mse: m,
        ssim: s,
        tv: t,
    })
}

/// SSIM of two plain images, without gradients.
pub fn ssim_value(y: &Tensor, y_hat: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(y.clone());
    let b = tape.constant(y_hat.clone());
    let s = ssim(&mut tape, a, b)?;
    Ok(tape.value(s).item())
}

pub fn tv_value(y: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(y.clone());
    let t = tv(&mut tape, a)?;
    Ok(tape.value(t).item())
}

pub fn mse_value(y: &Tensor, y_hat: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let a = tape.constant(y.clone());
    let b = tape.constant(y_hat.clone());
    let m = mse(&mut tape, a, b)?;
    Ok(tape.value(m).item())
}
