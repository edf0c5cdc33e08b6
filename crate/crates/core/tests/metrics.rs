use pact_core::metrics::compute_metrics;
use pact_core::{ImageField, ImageGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Second implementation: a full 2-d Gaussian kernel and two-pass
/// (mean, then centred moments) statistics per window.
fn ssim_oracle(a: &[f64], b: &[f64], n: usize) -> f64 {
    let w = 11usize;
    let sigma = 1.5f64;
    let half = (w / 2) as f64;
    let mut kernel = vec![0.0; w * w];
    for i in 0..w {
        for j in 0..w {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            kernel[i * w + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let m = n - w + 1;
    let mut total = 0.0;
    for oi in 0..m {
        for oj in 0..m {
            let px = |v: &[f64], i: usize, j: usize| v[(oi + i) * n + oj + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..w {
                for j in 0..w {
                    ma += kernel[i * w + j] * px(a, i, j);
                    mb += kernel[i * w + j] * px(b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..w {
                for j in 0..w {
                    let (da, db) = (px(a, i, j) - ma, px(b, i, j) - mb);
                    va += kernel[i * w + j] * da * da;
                    vb += kernel[i * w + j] * db * db;
                    cov += kernel[i * w + j] * da * db;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (m * m) as f64
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let peak = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    v.iter().map(|x| x / peak).collect()
}

fn field(v: Vec<f64>) -> ImageField {
    let n = (v.len() as f64).sqrt() as usize;
    ImageField::new(ImageGrid::new(n, 1e-3), v).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect();
    (a, b)
}

#[test]
fn matches_independent_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (a, b) = random_pair(&mut rng, 64);
        let r = compute_metrics(&field(a.clone()), &field(b.clone()), true).unwrap();
        let (na, nb) = (normalize(&a), normalize(&b));
        let mse = na.iter().zip(&nb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / na.len() as f64;
        assert!((r.ssim - ssim_oracle(&na, &nb, 64)).abs() < 1e-6);
        assert!((r.psnr_db - (-10.0 * mse.log10())).abs() < 1e-6);
        assert!((r.rmse - mse.sqrt()).abs() < 1e-6);
    }
}

#[test]
fn ssim_of_identical_images_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, _) = random_pair(&mut rng, 32);
    let r = compute_metrics(&field(a.clone()), &field(a), true).unwrap();
    assert!((r.ssim - 1.0).abs() < 1e-9);
}

#[test]
fn ssim_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (a, b) = random_pair(&mut rng, 32);
        let ab = compute_metrics(&field(a.clone()), &field(b.clone()), true).unwrap();
        let ba = compute_metrics(&field(b), &field(a), true).unwrap();
        assert!((ab.ssim - ba.ssim).abs() < 1e-12);
    }
}

#[test]
fn normalized_metrics_ignore_positive_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = random_pair(&mut rng, 32);
    let base = compute_metrics(&field(a.clone()), &field(b.clone()), true).unwrap();
    let scaled = compute_metrics(&field(a.iter().map(|v| v * 7.3).collect()), &field(b.iter().map(|v| v * 0.02).collect()), true)
        .unwrap();
    assert!((base.ssim - scaled.ssim).abs() < 1e-12);
    assert!((base.rmse - scaled.rmse).abs() < 1e-12);
    assert!((base.psnr_db - scaled.psnr_db).abs() < 1e-9);
}

#[test]
fn quality_falls_as_noise_grows() {
    let n = 32;
    let reference: Vec<f64> = (0..n * n)
        .map(|q| {
            let (i, j) = ((q / n) as f64 - 15.5, (q % n) as f64 - 15.5);
            if i * i + j * j < 100.0 { 1.0 } else { 0.2 }
        })
        .collect();
    let sigmas = [0.01, 0.03, 0.1, 0.2, 0.4];
    let mut monotone = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let reports: Vec<_> = sigmas
            .iter()
            .map(|s| {
                let noisy: Vec<f64> = reference.iter().zip(&noise).map(|(r, z)| r + s * z).collect();
                compute_metrics(&field(noisy), &field(reference.clone()), false).unwrap()
            })
            .collect();
        if reports.windows(2).all(|w| w[1].ssim <= w[0].ssim && w[1].psnr_db <= w[0].psnr_db) {
            monotone += 1;
        }
    }
    assert!(monotone > 5, "{monotone} of 10 seeds monotone");
}
