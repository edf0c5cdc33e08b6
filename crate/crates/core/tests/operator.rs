use pact_core::acoustic::{
    das_reconstruct, das_with_operator, iterative_reconstruct, IterativeConfig, Regularizer,
};
use pact_core::image_ops::{rotate_image, RotationSpec};
use pact_core::{CoreError, ImageField, ImageGrid, RingGeometry, Sinogram, SystemMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_instance(n_elements: usize, n: usize) -> (RingGeometry, ImageGrid) {
    let geometry = RingGeometry {
        n_elements,
        ..RingGeometry::desk()
    };
    (geometry, ImageGrid::new(n, 0.02 / n as f64))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn densify(a: &SystemMatrix) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|r| {
            let mut row = vec![0.0; a.cols()];
            for (c, w) in a.row(r) {
                row[c] += w;
            }
            row
        })
        .collect()
}

#[test]
fn operator_entries_match_independent_time_of_flight() {
    let (geometry, grid) = small_instance(8, 16);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let dense = densify(&a);
    let c = (grid.nx as f64 - 1.0) / 2.0;
    for e in 0..8 {
        let ang = 2.0 * std::f64::consts::PI * e as f64 / 8.0;
        let (ex, ey) = (geometry.radius_m * ang.cos(), geometry.radius_m * ang.sin());
        for q in 0..grid.len() {
            let (i, j) = ((q / grid.nx) as f64, (q % grid.nx) as f64);
            let (px, py) = ((j - c) * grid.pitch_m, (c - i) * grid.pitch_m);
            let s = ((ex - px).hypot(ey - py) / geometry.sound_speed_mps) * geometry.fs_hz;
            let k = s.floor() as usize;
            let f = s - s.floor();
            let row = e * geometry.n_samples;
            // Taps are quantised to 2^-20 of a sample.
            assert!((dense[row + k][q] - (1.0 - f)).abs() < 1e-6);
            assert!((dense[row + k + 1][q] - f).abs() < 1e-6);
        }
    }
}

#[test]
fn adjoint_identity_against_dense_oracle() {
    let (geometry, grid) = small_instance(8, 16);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let dense = densify(&a);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_vec(&mut rng, a.cols());
        let y = random_vec(&mut rng, a.rows());
        let mut ap = vec![0.0; a.rows()];
        a.apply(&p, &mut ap);
        let mut aty = vec![0.0; a.cols()];
        a.apply_adjoint(&y, &mut aty);

        let ap_dense: Vec<f64> = dense.iter().map(|r| dot(r, &p)).collect();
        let aty_dense: Vec<f64> = (0..a.cols()).map(|c| dense.iter().zip(&y).map(|(r, v)| r[c] * v).sum()).collect();
        for (s, d) in ap.iter().zip(&ap_dense) {
            assert!((s - d).abs() < 1e-12);
        }
        for (s, d) in aty.iter().zip(&aty_dense) {
            assert!((s - d).abs() < 1e-12);
        }
        let norm = dot(&ap, &ap).sqrt() * dot(&y, &y).sqrt();
        worst = worst.max((dot(&ap, &y) - dot(&p, &aty)).abs() / (norm + 1e-30));
    }
    assert!(worst < 1e-10, "relative adjoint error {worst}");
}

#[test]
fn partition_of_unity_per_element_and_pixel() {
    let (geometry, grid) = small_instance(16, 24);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let mut sums = vec![0.0f64; geometry.n_elements * a.cols()];
    for r in 0..a.rows() {
        let e = r / geometry.n_samples;
        for (c, w) in a.row(r) {
            sums[e * a.cols() + c] += w;
        }
    }
    assert!(sums.iter().all(|&s| s == 1.0));
}

fn quarter_turn_check(values: Vec<f64>, exact: bool) {
    let (geometry, grid) = small_instance(16, 32);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let p = ImageField::new(grid, values).unwrap();
    let y = a.forward_project(&p).unwrap();
    let rotated = rotate_image(&p, &RotationSpec::quarter_turns(1)).unwrap();
    let yr = a.forward_project(&rotated).unwrap();
    let shift = geometry.n_elements / 4;
    for e in 0..geometry.n_elements {
        let src = y.channel((e + geometry.n_elements - shift) % geometry.n_elements);
        for (u, v) in yr.channel(e).iter().zip(src) {
            if exact {
                assert_eq!(u, v, "element {e}");
            } else {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()), "element {e}");
            }
        }
    }
}

#[test]
fn rotational_covariance_is_exact_for_dyadic_images() {
    // Values on a coarse dyadic lattice keep every partial sum exact, so the
    // permuted summation order cannot change the result.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    quarter_turn_check((0..1024).map(|_| rng.random_range(0..8) as f64 / 8.0).collect(), true);
}

#[test]
fn rotational_covariance_for_general_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    quarter_turn_check(random_vec(&mut rng, 1024), false);
}

fn disc_source(grid: &ImageGrid, row: usize, col: usize, r: f64) -> ImageField {
    let mut p = ImageField::zeros(*grid);
    for i in 0..grid.ny {
        for j in 0..grid.nx {
            let d2 = (i as f64 - row as f64).powi(2) + (j as f64 - col as f64).powi(2);
            if d2 <= r * r {
                p.values[i * grid.nx + j] = 1.0;
            }
        }
    }
    p
}

fn peak_to_background(p: &ImageField, row: usize, col: usize) -> f64 {
    let n = p.grid.nx;
    let peak = p.at(row, col).abs();
    let bg: Vec<f64> = (0..p.values.len())
        .filter(|&q| {
            let (i, j) = ((q / n) as f64, (q % n) as f64);
            (i - row as f64).powi(2) + (j - col as f64).powi(2) > 16.0
        })
        .map(|q| p.values[q].abs())
        .collect();
    // Strongest artifact outside a 4-pixel radius of the peak.
    peak / bg.iter().fold(0.0f64, |m, v| m.max(*v))
}

#[test]
fn das_round_trip_finds_the_source() {
    let geometry = RingGeometry::desk();
    let grid = ImageGrid::new(32, 0.02 / 32.0);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let (row, col) = (10, 21);
    let p = disc_source(&grid, row, col, 1.0);
    let y = a.forward_project(&p).unwrap();
    let full = das_reconstruct(&geometry, &grid, &y).unwrap();
    let (ai, aj) = full.argmax();
    assert!(ai.abs_diff(row) <= 1 && aj.abs_diff(col) <= 1, "argmax ({ai}, {aj})");

    let mut masked = y.clone();
    for e in (1..geometry.n_elements).step_by(2) {
        masked.channel_mut(e).fill(0.0);
    }
    let half = das_reconstruct(&geometry, &grid, &masked).unwrap();
    let (bi, bj) = half.argmax();
    assert!(bi.abs_diff(row) <= 1 && bj.abs_diff(col) <= 1, "masked argmax ({bi}, {bj})");
    let (pf, ph) = (peak_to_background(&full, ai, aj), peak_to_background(&half, bi, bj));
    assert!(ph < pf, "masked ratio {ph} vs full {pf}");
}

#[test]
fn das_matches_scaled_adjoint_and_is_linear() {
    let (geometry, grid) = small_instance(16, 24);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut y = Sinogram::new(geometry, random_vec(&mut rng, a.rows())).unwrap();
    for e in [0, 3, 4, 9] {
        y.channel_mut(e).fill(0.0);
    }
    let direct = das_reconstruct(&geometry, &grid, &y).unwrap();
    let via_a = das_with_operator(&a, &y).unwrap();
    for (u, v) in direct.values.iter().zip(&via_a.values) {
        assert!((u - v).abs() < 1e-12);
    }
    let scaled = Sinogram::new(geometry, y.data.iter().map(|v| 2.5 * v).collect()).unwrap();
    let ds = das_reconstruct(&geometry, &grid, &scaled).unwrap();
    for (u, v) in ds.values.iter().zip(&direct.values) {
        assert!((u - 2.5 * v).abs() < 1e-12);
    }
    assert!(matches!(
        das_reconstruct(&geometry, &grid, &Sinogram::zeros(geometry)),
        Err(CoreError::AllChannelsMasked)
    ));
}

#[test]
fn iterative_zero_is_a_fixed_point() {
    let (geometry, grid) = small_instance(16, 16);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    for cfg in [IterativeConfig::tv(), IterativeConfig::wavelet()] {
        let cfg = IterativeConfig { n_steps: 20, ..cfg };
        let out = iterative_reconstruct(&a, &Sinogram::zeros(geometry), &cfg).unwrap();
        assert!(out.image.values.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn iterative_objective_monotone_under_small_fixed_step() {
    let (geometry, grid) = small_instance(16, 16);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let p = disc_source(&grid, 6, 9, 3.0);
    let y = a.forward_project(&p).unwrap();
    for regularizer in [Regularizer::Tv, Regularizer::Wavelet] {
        let base = match regularizer {
            Regularizer::Tv => IterativeConfig::tv(),
            Regularizer::Wavelet => IterativeConfig::wavelet(),
        };
        let cfg = IterativeConfig {
            step0: 1e-3,
            halve_every: None,
            n_steps: 50,
            ..base
        };
        let out = iterative_reconstruct(&a, &y, &cfg).unwrap();
        for w in out.objective.windows(2) {
            assert!(w[1] <= w[0], "{regularizer:?}: {} -> {}", w[0], w[1]);
        }
        assert!(out.image.values.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn iterative_improves_on_das_with_half_the_channels() {
    let geometry = RingGeometry::desk();
    let grid = ImageGrid::new(32, 0.02 / 32.0);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let p = disc_source(&grid, 13, 17, 6.0);
    let mut y = a.forward_project(&p).unwrap();
    for e in (1..geometry.n_elements).step_by(2) {
        y.channel_mut(e).fill(0.0);
    }
    let das = das_reconstruct(&geometry, &grid, &y).unwrap();
    let tv = iterative_reconstruct(&a, &y, &IterativeConfig::tv()).unwrap().image;
    let s_das = pact_core::metrics::compute_metrics(&das, &p, true).unwrap().ssim;
    let s_tv = pact_core::metrics::compute_metrics(&tv, &p, true).unwrap().ssim;
    assert!(s_tv > s_das, "tv {s_tv} das {s_das}");
}

#[test]
fn huge_step_diverges() {
    let (geometry, grid) = small_instance(16, 16);
    let a = SystemMatrix::build(&geometry, &grid).unwrap();
    let y = a.forward_project(&disc_source(&grid, 8, 8, 3.0)).unwrap();
    let cfg = IterativeConfig {
        step0: 1e12,
        halve_every: None,
        n_steps: 200,
        ..IterativeConfig::tv()
    };
    assert!(matches!(iterative_reconstruct(&a, &y, &cfg), Err(CoreError::Divergence(_))));
    let bad = IterativeConfig { n_steps: 0, ..cfg };
    assert!(matches!(iterative_reconstruct(&a, &y, &bad), Err(CoreError::InvalidArgument(_))));
}

#[test]
fn persisted_operator_loads_identically() {
    let (geometry, grid) = small_instance(8, 16);
    let a = SystemMatrix::build_with(&geometry, &grid, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.sysm");
    a.save(&path).unwrap();
    assert_eq!(SystemMatrix::load(&path).unwrap(), a);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(SystemMatrix::from_bytes(&bytes), Err(CoreError::CorruptFile(_))));
}
