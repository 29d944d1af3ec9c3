//! Surrogate-gradient BPTT training with Adam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::BatchNormMode;
use crate::checkpoint::Checkpoint;
use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::layers::Forward;
use crate::loss::{net_loss, LossWeights};
use crate::model::DehazeModel;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub timesteps: usize,
    pub resolution: usize,
    pub batch_size: usize,
    /// First (1-based) epoch after which validation loss is measured.
    pub validation_start_epoch: usize,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            timesteps: 10,
            resolution: 512,
            batch_size: 1,
            validation_start_epoch: 20,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 8, got {}",
                self.resolution
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        self.loss.validate()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every learnable parameter with a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if params.get(name)?.kind != ParamKind::Learnable {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.value_mut(name)?;
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{name}: gradient {:?}", g.shape())));
            }
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                // leaves signed zeros untouched when the step vanishes
                if delta != 0.0 {
                    *p -= delta;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    pub mse: f32,
    pub ssim: f32,
    pub tv: f32,
    /// L2 norm of each learnable parameter's gradient.
    pub grad_norms: BTreeMap<String, f32>,
}

/// Gradient per learnable parameter name.
pub type GradMap = BTreeMap<String, Tensor>;
/// Updated batch-norm running statistics per layer prefix.
pub type StatUpdates = BTreeMap<String, crate::autodiff::RunningStats>;

/// Forward, loss and backward on one batch; returns the report, raw
/// gradients and batch-norm statistic updates without touching the
/// parameters.
pub fn compute_gradients(
    model: &DehazeModel,
    params: &ParamStore,
    hazy: &Tensor,
    reference: &Tensor,
    steps: usize,
    weights: LossWeights,
) -> Result<(StepReport, GradMap, StatUpdates)> {
    let mut f = Forward::new(params, BatchNormMode::Train, steps);
    let out = model.forward(&mut f, hazy)?;
    let reference = crate::model::validate_images(reference)?;
    let y = f.tape.constant(reference);
    let loss = net_loss(&mut f.tape, y, out.y_hat, weights)?;
    let value = f.tape.value(loss.total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "net_loss" });
    }
    let mut grads = f.tape.backward(loss.total)?;
    let report_base = (
        value,
        f.tape.value(loss.mse).item(),
        f.tape.value(loss.ssim).item(),
        f.tape.value(loss.tv).item(),
    );
    let parts = f.finish();
    let mut out_grads = BTreeMap::new();
    let mut norms = BTreeMap::new();
    for name in params.learnable_names() {
        let g = parts
            .bound
            .get(name)
            .and_then(|&v| grads.take(v))
            .unwrap_or_else(|| Tensor::zeros(params.get(name).map(|e| e.value.shape()).unwrap_or(&[0])));
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        norms.insert(name.to_string(), g.dot(&g).sqrt() as f32);
        out_grads.insert(name.to_string(), g);
    }
    let report = StepReport {
        loss: report_base.0,
        mse: report_base.1,
        ssim: report_base.2,
        tv: report_base.3,
        grad_norms: norms,
    };
    Ok((report, out_grads, parts.stat_updates))
}

/// One optimisation step on a `[B, 3, H, W]` batch.
pub fn train_step(
    model: &DehazeModel,
    params: &mut ParamStore,
    optimizer: &mut Adam,
    hazy: &Tensor,
    reference: &Tensor,
    steps: usize,
    weights: LossWeights,
) -> Result<StepReport> {
    let (report, grads, stats) = compute_gradients(model, params, hazy, reference, steps, weights)?;
    optimizer.update(params, &grads)?;
    for (prefix, s) in &stats {
        params.set_running_stats(prefix, s)?;
    }
    Ok(report)
}

/// Mean evaluation-mode loss over a dataset.
pub fn validation_loss(
    model: &DehazeModel,
    params: &ParamStore,
    data: &PairedDataset,
    steps: usize,
    weights: LossWeights,
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut total = 0.0f64;
    for i in 0..data.len() {
        let (h, r) = data.batch(&[i])?;
        let mut f = Forward::new(params, BatchNormMode::Eval, steps);
        let out = model.forward(&mut f, &h)?;
        let y = f.tape.constant(r);
        let loss = net_loss(&mut f.tape, y, out.y_hat, weights)?;
        total += f.tape.value(loss.total).item() as f64;
    }
    Ok((total / data.len() as f64) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Optimiser steps taken so far.
    pub step: u64,
    pub train_loss: f32,
    pub val_loss: Option<f32>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best: Checkpoint,
    pub best_epoch: u64,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains up to `cfg.epochs` total epochs, resuming from `resume` when
/// given, and keeps the checkpoint with the lowest validation loss. When
/// no validation epoch runs, the last checkpoint is also the best.
pub fn fit(
    model: &DehazeModel,
    params: &mut ParamStore,
    train: &PairedDataset,
    val: &PairedDataset,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut start = 0u64;
    let mut best_val = None;
    if let Some(ck) = resume {
        ck.restore(params)?;
        ck.restore_optimizer(&mut opt)?;
        start = ck.epoch()?;
        best_val = ck.best_val_loss();
    }
    let mut best: Option<(Checkpoint, u64)> = None;
    let mut log = Vec::new();
    let mut last = None;
    for epoch in start + 1..=cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (h, r) = train.batch(chunk)?;
            let rep = train_step(model, params, &mut opt, &h, &r, cfg.timesteps, cfg.loss)?;
            sum += rep.loss as f64;
            batches += 1;
        }
        let val_loss = if epoch >= cfg.validation_start_epoch as u64 {
            Some(validation_loss(model, params, val, cfg.timesteps, cfg.loss)?)
        } else {
            None
        };
        let improved = match (val_loss, best_val) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_val = val_loss;
        }
        let row = EpochLog {
            epoch,
            step: opt.step,
            train_loss: (sum / batches as f64) as f32,
            val_loss,
        };
        on_epoch(&row);
        log.push(row);
        let ck = Checkpoint::capture(params, Some(&opt), epoch, best_val);
        if improved {
            best = Some((ck.clone(), epoch));
        }
        last = Some(ck);
    }
    let last = last.unwrap_or_else(|| Checkpoint::capture(params, Some(&opt), start, best_val));
    let last_epoch = last.epoch()?;
    let (best, best_epoch) = best.unwrap_or_else(|| (last.clone(), last_epoch));
    Ok(FitResult {
        best,
        best_epoch,
        last,
        log,
    })
}
