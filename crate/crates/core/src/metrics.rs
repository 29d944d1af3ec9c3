//! PSNR / SSIM evaluation.

use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::loss::ssim_value;
use crate::model::DehazeModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `10·log10(1 / MSE)` for images in [0, 1]; `+∞` when identical.
pub fn psnr(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", y.shape(), y_hat.shape())));
    }
    if y.numel() == 0 {
        return Err(Error::shape("psnr", "empty image"));
    }
    let se: f64 = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = se / y.numel() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Windowed SSIM of images clamped to [0, 1].
pub fn ssim(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    Ok(ssim_value(&y.clamp(0.0, 1.0), &y_hat.clamp(0.0, 1.0))? as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dataset("no images to evaluate".into()));
        }
        let n = rows.len() as f64;
        Ok(Self {
            mean_psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            rows,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Unsupported(format!("report export: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<32} {:>10} {:>8}\n", "image", "PSNR (dB)", "SSIM");
        for r in &self.rows {
            s.push_str(&format!("{:<32} {:>10.4} {:>8.4}\n", r.name, r.psnr_db, r.ssim));
        }
        s.push_str(&format!("{:<32} {:>10.4} {:>8.4}\n", "mean", self.mean_psnr_db, self.mean_ssim));
        s
    }
}

/// Scores a model on every pair; outputs are clamped to [0, 1].
pub fn evaluate(model: &DehazeModel, params: &ParamStore, data: &PairedDataset, steps: usize) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let out = model.infer(params, &data.hazy[i], steps)?;
        let out = out.clamp(0.0, 1.0).reshape(data.reference[i].shape())?;
        rows.push(EvalRow {
            name: data.names[i].clone(),
            psnr_db: psnr(&data.reference[i], &out)?,
            ssim: ssim(&data.reference[i], &out)?,
        });
    }
    EvalReport::from_rows(rows)
}

/// Scores precomputed outputs against references.
pub fn score_pairs(names: &[String], refs: &[Tensor], outputs: &[Tensor]) -> Result<EvalReport> {
    let rows = names
        .iter()
        .zip(refs)
        .zip(outputs)
        .map(|((n, r), o)| {
            Ok(EvalRow {
                name: n.clone(),
                psnr_db: psnr(r, o)?,
                ssim: ssim(r, o)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}
