//! Full-reference image quality: SSIM, PSNR and RMSE.
//!
//! Both images are optionally scaled to unit peak before comparison, which
//! makes the metrics insensitive to the arbitrary amplitude of a
//! reconstruction. SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated
//! at every position where the window fits inside the image.

use serde::Serialize;

use crate::acoustic::ImageField;
use crate::error::{CoreError, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub ssim: f64,
    /// `+inf` when the images are identical.
    pub psnr_db: f64,
    pub rmse: f64,
    pub normalized: bool,
}

pub fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Scales by the largest magnitude so the peak becomes one.
fn peak_normalize(v: &[f64]) -> Vec<f64> {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / peak).collect()
}

/// Separable "valid" filtering of an `ny x nx` image.
fn filter_valid(img: &[f64], nx: usize, ny: usize, w: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ox, oy) = (nx + 1 - WINDOW, ny + 1 - WINDOW);
    let mut rows = vec![0.0; ny * ox];
    for i in 0..ny {
        for j in 0..ox {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * img[i * nx + j + k];
            }
            rows[i * ox + j] = acc;
        }
    }
    let mut out = vec![0.0; oy * ox];
    for i in 0..oy {
        for j in 0..ox {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * rows[(i + k) * ox + j];
            }
            out[i * ox + j] = acc;
        }
    }
    (out, ox, oy)
}

/// Mean SSIM of two equally sized images with dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], nx: usize, ny: usize) -> Result<f64> {
    if a.len() != nx * ny || b.len() != nx * ny {
        return Err(CoreError::ShapeMismatch("ssim inputs differ in size".into()));
    }
    if nx < WINDOW || ny < WINDOW {
        return Err(CoreError::BadShape(format!("ssim needs at least {WINDOW}x{WINDOW} pixels")));
    }
    let w = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ox, oy) = filter_valid(a, nx, ny, &w);
    let (mu_b, _, _) = filter_valid(b, nx, ny, &w);
    let (aa, _, _) = filter_valid(&prod(a, a), nx, ny, &w);
    let (bb, _, _) = filter_valid(&prod(b, b), nx, ny, &w);
    let (ab, _, _) = filter_valid(&prod(a, b), nx, ny, &w);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for k in 0..ox * oy {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = aa[k] - ma * ma;
        let vb = bb[k] - mb * mb;
        let cov = ab[k] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ox * oy) as f64)
}

pub fn compute_metrics(p: &ImageField, reference: &ImageField, normalize: bool) -> Result<MetricReport> {
    if p.grid.nx != reference.grid.nx || p.grid.ny != reference.grid.ny {
        return Err(CoreError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            p.grid.ny, p.grid.nx, reference.grid.ny, reference.grid.nx
        )));
    }
    if reference.values.iter().all(|&v| v == 0.0) {
        return Err(CoreError::ZeroReference);
    }
    let (a, b) = if normalize {
        (peak_normalize(&p.values), peak_normalize(&reference.values))
    } else {
        (p.values.clone(), reference.values.clone())
    };
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    let psnr_db = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Ok(MetricReport {
        ssim: ssim(&a, &b, p.grid.nx, p.grid.ny)?,
        psnr_db,
        rmse: mse.sqrt(),
        normalized: normalize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::ImageGrid;

    fn field(v: Vec<f64>) -> ImageField {
        ImageField::new(ImageGrid::new(16, 1e-3), v).unwrap()
    }

    #[test]
    fn identical_images() {
        let p = field((0..256).map(|i| ((i * 7) % 13) as f64 / 13.0).collect());
        let r = compute_metrics(&p, &p, true).unwrap();
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.psnr_db, f64::INFINITY);
    }

    #[test]
    fn constant_offset_without_normalization() {
        let reference = field((0..256).map(|i| if i == 17 { 1.0 } else { 0.5 }).collect());
        let p = field(reference.values.iter().map(|v| v + 0.1).collect());
        let r = compute_metrics(&p, &reference, false).unwrap();
        assert!((r.rmse - 0.1).abs() < 1e-12);
        assert!((r.psnr_db - 20.0).abs() < 1e-6);
    }

    #[test]
    fn zero_reference_and_shape_errors() {
        let z = field(vec![0.0; 256]);
        assert!(matches!(compute_metrics(&z, &z, true), Err(CoreError::ZeroReference)));
        let small = ImageField::zeros(ImageGrid::new(12, 1e-3));
        assert!(matches!(compute_metrics(&small, &z, true), Err(CoreError::ShapeMismatch(_))));
    }
}
