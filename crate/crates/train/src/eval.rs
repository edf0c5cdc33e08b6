//! Sparse-channel evaluation sweep.

use std::fmt::Write as _;
use std::path::Path;

use pact_core::acoustic::das_with_operator;
use pact_core::metrics::compute_metrics;
use pact_core::phantom::Dataset;
use pact_core::{rng, ImageField, SystemMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::masks::{apply_mask, ChannelMask};
use crate::train::{reconstruct, LoadedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// The simulated phantom.
    Phantom,
    /// Delay-and-sum from every channel of the noisy sinogram.
    DenseDas,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub slice_id: usize,
    pub method: String,
    pub channels_kept: usize,
    pub ssim: f64,
    pub psnr_db: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub keep_fractions: Vec<f64>,
    pub seed: u64,
    pub reference: Reference,
    /// Label used in the `method` column for the network.
    pub model_label: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            keep_fractions: vec![1.0],
            seed: 0,
            reference: Reference::Phantom,
            model_label: "cdss".into(),
        }
    }
}

/// Channels kept at a fraction: `round(n * f)`, ties away from zero.
pub fn kept_for_fraction(n: usize, keep_fraction: f64) -> usize {
    (n as f64 * keep_fraction).round() as usize
}

/// The mask used for `slice` at fraction index `fi`. A fraction that keeps
/// every channel yields the identity mask.
pub fn eval_mask(n: usize, keep_fraction: f64, seed: u64, fi: usize, slice: usize) -> Result<ChannelMask> {
    let k = kept_for_fraction(n, keep_fraction);
    if k == 0 || k > n {
        return Err(TrainError::InvalidConfig(format!("keep fraction {keep_fraction} keeps {k} of {n} channels")));
    }
    if k == n {
        return Ok(ChannelMask::all(n));
    }
    let mut r = rng::stream(seed, rng::stream_id(3, ((fi as u64) << 32) | slice as u64));
    ChannelMask::random_kept(n, k, &mut r)
}

/// Masks every test sinogram at every keep fraction, reconstructs with
/// delay-and-sum and (when given) the network, and scores both against the
/// reference with peak-normalised metrics. Rows are ordered by fraction,
/// then slice, then method.
pub fn evaluate_model(
    model: Option<&LoadedModel>,
    a: &SystemMatrix,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<Vec<MetricRow>> {
    if dataset.geometry != *a.geometry() || dataset.grid != *a.grid() {
        return Err(TrainError::GeometryMismatch("dataset geometry or grid differs from the operator".into()));
    }
    let n = a.geometry().n_elements;
    let mut rows = Vec::new();
    for (fi, &kf) in cfg.keep_fractions.iter().enumerate() {
        for (slice, entry) in dataset.entries.iter().enumerate() {
            let reference: ImageField = match cfg.reference {
                Reference::Phantom => entry.phantom.clone(),
                Reference::DenseDas => das_with_operator(a, &entry.noisy)?,
            };
            let mask = eval_mask(n, kf, cfg.seed, fi, slice)?;
            let y = apply_mask(&entry.noisy, &mask)?;
            let kept = mask.kept();
            let mut push = |method: &str, p: &ImageField| -> Result<()> {
                let m = compute_metrics(p, &reference, true)?;
                rows.push(MetricRow {
                    slice_id: slice,
                    method: method.to_string(),
                    channels_kept: kept,
                    ssim: m.ssim,
                    psnr_db: m.psnr_db,
                    rmse: m.rmse,
                });
                Ok(())
            };
            push("das", &das_with_operator(a, &y)?)?;
            if let Some(model) = model {
                let p = reconstruct(&model.params, &model.config, a, &y, model.input_scale)?;
                push(&cfg.model_label, &p)?;
            }
        }
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub channels_kept: usize,
    pub n: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per method and channel count, in first-seen order.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.channels_kept);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, kept)| {
            let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.method == method && r.channels_kept == kept).collect();
            let col = |f: fn(&MetricRow) -> f64| mean_std(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (ssim_mean, ssim_std) = col(|r| r.ssim);
            let (psnr_mean, psnr_std) = col(|r| r.psnr_db);
            let (rmse_mean, rmse_std) = col(|r| r.rmse);
            SummaryRow {
                method,
                channels_kept: kept,
                n: sel.len(),
                ssim_mean,
                ssim_std,
                psnr_mean,
                psnr_std,
                rmse_mean,
                rmse_std,
            }
        })
        .collect()
}

/// Plain-text table with `mean ± std` cells.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut s = String::from("method,channels_kept,n,ssim,psnr_db,rmse\n");
    for r in summary {
        let _ = writeln!(
            s,
            "{},{},{},{:.3} ± {:.3},{:.2} ± {:.2},{:.4} ± {:.4}",
            r.method, r.channels_kept, r.n, r.ssim_mean, r.ssim_std, r.psnr_mean, r.psnr_std, r.rmse_mean, r.rmse_std
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kept_counts_for_fractions() {
        let got: Vec<usize> = [0.1, 0.2, 0.3, 0.4, 0.5].iter().map(|&f| kept_for_fraction(128, f)).collect();
        assert_eq!(got, vec![13, 26, 38, 51, 64]);
    }

    #[test]
    fn full_fraction_is_identity() {
        assert_eq!(eval_mask(64, 1.0, 3, 0, 5).unwrap(), ChannelMask::all(64));
        assert!(eval_mask(64, 0.001, 3, 0, 5).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn summary_format() {
        let rows = vec![
            MetricRow {
                slice_id: 0,
                method: "das".into(),
                channels_kept: 32,
                ssim: 0.5,
                psnr_db: 20.0,
                rmse: 0.1,
            },
            MetricRow {
                slice_id: 1,
                method: "das".into(),
                channels_kept: 32,
                ssim: 0.7,
                psnr_db: 22.0,
                rmse: 0.08,
            },
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].ssim_mean - 0.6).abs() < 1e-12);
        assert!(format_summary(&s).contains("0.600 ± 0.141"));
    }
}
