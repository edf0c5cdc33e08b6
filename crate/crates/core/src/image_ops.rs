//! Image-domain operators: rotation about the grid centre, the orthonormal
//! Haar wavelet transform and anisotropic total variation.
//!
//! The flat-buffer functions (`*_flat`) are what the training code wraps as
//! linear graph operators; the [`ImageField`] versions are thin shells.

use std::f64::consts::FRAC_PI_2;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::acoustic::ImageField;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Exact90,
    Bilinear,
}

/// Counter-clockwise rotation about the grid centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSpec {
    pub angle_rad: f64,
    pub interpolation: Interpolation,
}

impl RotationSpec {
    pub fn quarter_turns(k: usize) -> Self {
        Self {
            angle_rad: FRAC_PI_2 * (k % 4) as f64,
            interpolation: Interpolation::Exact90,
        }
    }

    /// Number of quarter turns for an exact rotation.
    pub fn exact_turns(&self) -> Result<usize> {
        let t = self.angle_rad / FRAC_PI_2;
        let k = t.round();
        if (self.angle_rad - k * FRAC_PI_2).abs() > 1e-12 {
            return Err(CoreError::AngleNotExact(self.angle_rad));
        }
        Ok(k.rem_euclid(4.0) as usize)
    }
}

/// Rotates an `n x n` row-major buffer by `turns` quarter turns
/// counter-clockwise. Pure index permutation.
pub fn rotate90_flat<T: Copy>(src: &[T], n: usize, turns: usize, dst: &mut [T]) {
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = match turns % 4 {
                0 => (i, j),
                1 => (j, n - 1 - i),
                2 => (n - 1 - i, n - 1 - j),
                _ => (n - 1 - j, i),
            };
            dst[i * n + j] = src[si * n + sj];
        }
    }
}

/// Bilinear sampling positions: for output pixel `(i, j)` the four source
/// indices and weights. Samples falling outside the grid contribute zero.
fn bilinear_taps(n: usize, angle: f64, i: usize, j: usize) -> [(usize, f64); 4] {
    let c = (n as f64 - 1.0) / 2.0;
    let (x, y) = (j as f64 - c, c - i as f64);
    let (s, co) = angle.sin_cos();
    let xs = x * co + y * s;
    let ys = -x * s + y * co;
    let (col, row) = (xs + c, c - ys);
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let mut out = [(0usize, 0.0f64); 4];
    let cand = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ];
    for (k, &(r, cc, w)) in cand.iter().enumerate() {
        if r >= 0.0 && cc >= 0.0 && r < n as f64 && cc < n as f64 {
            out[k] = (r as usize * n + cc as usize, w);
        } else {
            out[k] = (0, 0.0);
        }
    }
    out
}

/// Bilinear rotation of an `n x n` buffer with zero fill.
pub fn rotate_bilinear_flat<T: Float>(src: &[T], n: usize, angle: f64, dst: &mut [T]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for (idx, w) in bilinear_taps(n, angle, i, j) {
                if w != 0.0 {
                    acc = acc + T::from(w).unwrap() * src[idx];
                }
            }
            dst[i * n + j] = acc;
        }
    }
}

/// Transpose of [`rotate_bilinear_flat`].
pub fn rotate_bilinear_adjoint_flat<T: Float>(src: &[T], n: usize, angle: f64, dst: &mut [T]) {
    dst.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..n {
        for j in 0..n {
            let g = src[i * n + j];
            for (idx, w) in bilinear_taps(n, angle, i, j) {
                if w != 0.0 {
                    dst[idx] = dst[idx] + T::from(w).unwrap() * g;
                }
            }
        }
    }
}

pub fn rotate_image(p: &ImageField, spec: &RotationSpec) -> Result<ImageField> {
    let n = p.grid.nx;
    if p.grid.nx != p.grid.ny {
        return Err(CoreError::BadShape("rotation needs a square image".into()));
    }
    let mut out = ImageField::zeros(p.grid);
    match spec.interpolation {
        Interpolation::Exact90 => rotate90_flat(&p.values, n, spec.exact_turns()?, &mut out.values),
        Interpolation::Bilinear => rotate_bilinear_flat(&p.values, n, spec.angle_rad, &mut out.values),
    }
    Ok(out)
}

// ---- Haar wavelets ----------------------------------------------------------

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// One detail level of a 2-d wavelet decomposition, each band `size x size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub size: usize,
    /// Low-pass vertically, high-pass horizontally.
    pub lh: Vec<f64>,
    /// High-pass vertically, low-pass horizontally.
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    pub grid: crate::acoustic::ImageGrid,
    /// Finest level first.
    pub details: Vec<Subbands>,
    /// Approximation band at the coarsest level.
    pub ll: Vec<f64>,
    pub family: String,
}

impl WaveletCoeffs {
    pub fn n_levels(&self) -> usize {
        self.details.len()
    }

    fn all(&self) -> impl Iterator<Item = &f64> {
        self.ll
            .iter()
            .chain(self.details.iter().flat_map(|d| d.lh.iter().chain(&d.hl).chain(&d.hh)))
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.ll.iter_mut().chain(
            self.details
                .iter_mut()
                .flat_map(|d| d.lh.iter_mut().chain(d.hl.iter_mut()).chain(d.hh.iter_mut())),
        )
    }

    pub fn l1_norm(&self) -> f64 {
        self.all().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.all().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Shrinks every coefficient towards zero by `t`.
    pub fn soft_threshold(&mut self, t: f64) {
        for v in self.all_mut() {
            *v = v.signum() * (v.abs() - t).max(0.0);
        }
    }
}

fn check_levels(nx: usize, ny: usize, levels: usize) -> Result<()> {
    let d = 1usize << levels;
    if nx != ny || nx == 0 || nx % d != 0 {
        return Err(CoreError::BadShape(format!(
            "{}x{} image is not square and divisible by 2^{}",
            ny, nx, levels
        )));
    }
    Ok(())
}

/// In-place multilevel orthonormal Haar transform of an `n x n` buffer in
/// Mallat layout: after level `l` the top-left `n / 2^l` block holds LL.
pub fn haar_forward_flat<T: Float>(buf: &mut [T], n: usize, levels: usize) {
    let r = T::from(INV_SQRT2).unwrap();
    let mut tmp = vec![T::zero(); n];
    let mut size = n;
    for _ in 0..levels {
        let half = size / 2;
        for i in 0..size {
            let row = &mut buf[i * n..i * n + size];
            for k in 0..half {
                let (a, b) = (row[2 * k], row[2 * k + 1]);
                tmp[k] = (a + b) * r;
                tmp[half + k] = (a - b) * r;
            }
            row.copy_from_slice(&tmp[..size]);
        }
        for j in 0..size {
            for k in 0..half {
                let (a, b) = (buf[2 * k * n + j], buf[(2 * k + 1) * n + j]);
                tmp[k] = (a + b) * r;
                tmp[half + k] = (a - b) * r;
            }
            for k in 0..size {
                buf[k * n + j] = tmp[k];
            }
        }
        size = half;
    }
}

/// Inverse of [`haar_forward_flat`]; also its transpose.
pub fn haar_inverse_flat<T: Float>(buf: &mut [T], n: usize, levels: usize) {
    let r = T::from(INV_SQRT2).unwrap();
    let mut tmp = vec![T::zero(); n];
    for l in (0..levels).rev() {
        let size = n >> l;
        let half = size / 2;
        for j in 0..size {
            for k in 0..half {
                let (s, d) = (buf[k * n + j], buf[(half + k) * n + j]);
                tmp[2 * k] = (s + d) * r;
                tmp[2 * k + 1] = (s - d) * r;
            }
            for k in 0..size {
                buf[k * n + j] = tmp[k];
            }
        }
        for i in 0..size {
            let row = &mut buf[i * n..i * n + size];
            for k in 0..half {
                let (s, d) = (row[k], row[half + k]);
                tmp[2 * k] = (s + d) * r;
                tmp[2 * k + 1] = (s - d) * r;
            }
            row.copy_from_slice(&tmp[..size]);
        }
    }
}

fn block(buf: &[f64], n: usize, r0: usize, c0: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        out.extend_from_slice(&buf[(r0 + i) * n + c0..(r0 + i) * n + c0 + size]);
    }
    out
}

fn put_block(buf: &mut [f64], n: usize, r0: usize, c0: usize, size: usize, src: &[f64]) {
    for i in 0..size {
        buf[(r0 + i) * n + c0..(r0 + i) * n + c0 + size].copy_from_slice(&src[i * size..(i + 1) * size]);
    }
}

pub fn dwt_forward(p: &ImageField, levels: usize) -> Result<WaveletCoeffs> {
    let n = p.grid.nx;
    check_levels(p.grid.nx, p.grid.ny, levels)?;
    let mut buf = p.values.clone();
    haar_forward_flat(&mut buf, n, levels);
    let mut details = Vec::with_capacity(levels);
    for l in 0..levels {
        let half = n >> (l + 1);
        details.push(Subbands {
            size: half,
            lh: block(&buf, n, 0, half, half),
            hl: block(&buf, n, half, 0, half),
            hh: block(&buf, n, half, half, half),
        });
    }
    let s = n >> levels;
    Ok(WaveletCoeffs {
        grid: p.grid,
        details,
        ll: block(&buf, n, 0, 0, s),
        family: "haar".into(),
    })
}

pub fn dwt_inverse(c: &WaveletCoeffs) -> ImageField {
    let n = c.grid.nx;
    let levels = c.n_levels();
    let mut buf = vec![0.0; n * n];
    put_block(&mut buf, n, 0, 0, n >> levels, &c.ll);
    for d in &c.details {
        put_block(&mut buf, n, 0, d.size, d.size, &d.lh);
        put_block(&mut buf, n, d.size, 0, d.size, &d.hl);
        put_block(&mut buf, n, d.size, d.size, d.size, &d.hh);
    }
    haar_inverse_flat(&mut buf, n, levels);
    ImageField {
        grid: c.grid,
        values: buf,
    }
}

// ---- total variation -------------------------------------------------------

/// Forward differences of an `ny x nx` buffer: `out[..n]` horizontal,
/// `out[n..]` vertical, with the last difference along each axis zero.
pub fn gradient_flat<T: Float>(src: &[T], nx: usize, ny: usize, out: &mut [T]) {
    let n = nx * ny;
    for i in 0..ny {
        for j in 0..nx {
            let k = i * nx + j;
            out[k] = if j + 1 < nx { src[k + 1] - src[k] } else { T::zero() };
            out[n + k] = if i + 1 < ny { src[k + nx] - src[k] } else { T::zero() };
        }
    }
}

/// Transpose of [`gradient_flat`].
pub fn gradient_adjoint_flat<T: Float>(src: &[T], nx: usize, ny: usize, out: &mut [T]) {
    let n = nx * ny;
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..ny {
        for j in 0..nx {
            let k = i * nx + j;
            if j + 1 < nx {
                out[k + 1] = out[k + 1] + src[k];
                out[k] = out[k] - src[k];
            }
            if i + 1 < ny {
                out[k + nx] = out[k + nx] + src[n + k];
                out[k] = out[k] - src[n + k];
            }
        }
    }
}

/// Anisotropic total variation: sum of absolute forward differences.
pub fn tv_seminorm(p: &ImageField) -> f64 {
    let mut d = vec![0.0; 2 * p.values.len()];
    gradient_flat(&p.values, p.grid.nx, p.grid.ny, &mut d);
    d.iter().map(|v| v.abs()).sum()
}

/// Subgradient of [`tv_seminorm`], `D^T sign(D p)` with `sign(0) = 0`.
pub fn tv_subgradient(p: &ImageField) -> ImageField {
    let mut d = vec![0.0; 2 * p.values.len()];
    gradient_flat(&p.values, p.grid.nx, p.grid.ny, &mut d);
    for v in d.iter_mut() {
        *v = if *v > 0.0 {
            1.0
        } else if *v < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    let mut out = ImageField::zeros(p.grid);
    gradient_adjoint_flat(&d, p.grid.nx, p.grid.ny, &mut out.values);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::ImageGrid;

    fn img(n: usize, v: &[f64]) -> ImageField {
        ImageField::new(ImageGrid::new(n, 1e-3), v.to_vec()).unwrap()
    }

    #[test]
    fn rotate_two_by_two() {
        let p = img(2, &[1.0, 2.0, 3.0, 4.0]);
        let r = rotate_image(&p, &RotationSpec::quarter_turns(1)).unwrap();
        assert_eq!(r.values, vec![2.0, 4.0, 1.0, 3.0]);
        let zero = rotate_image(&p, &RotationSpec::quarter_turns(0)).unwrap();
        assert_eq!(zero, p);
    }

    #[test]
    fn inexact_angle_rejected() {
        let p = img(2, &[1.0, 2.0, 3.0, 4.0]);
        let spec = RotationSpec {
            angle_rad: 0.3,
            interpolation: Interpolation::Exact90,
        };
        assert!(matches!(rotate_image(&p, &spec), Err(CoreError::AngleNotExact(_))));
    }

    #[test]
    fn bilinear_quarter_turn_matches_permutation() {
        let n = 6;
        let p = img(n, &(0..n * n).map(|i| (i as f64 * 0.77).sin()).collect::<Vec<_>>());
        let exact = rotate_image(&p, &RotationSpec::quarter_turns(1)).unwrap();
        let bil = rotate_image(
            &p,
            &RotationSpec {
                angle_rad: FRAC_PI_2,
                interpolation: Interpolation::Bilinear,
            },
        )
        .unwrap();
        for (a, b) in exact.values.iter().zip(&bil.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_two_by_two_ones() {
        let c = dwt_forward(&img(2, &[1.0; 4]), 1).unwrap();
        assert!((c.ll[0] - 2.0).abs() < 1e-15);
        assert_eq!(c.details[0].lh[0], 0.0);
        assert_eq!(c.details[0].hl[0], 0.0);
        assert_eq!(c.details[0].hh[0], 0.0);
        assert!((c.l1_norm() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn haar_zero_and_bad_shape() {
        let c = dwt_forward(&img(4, &[0.0; 16]), 2).unwrap();
        assert_eq!(c.l1_norm(), 0.0);
        assert!(matches!(dwt_forward(&img(6, &[0.0; 36]), 2), Err(CoreError::BadShape(_))));
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_seminorm(&img(3, &[2.0; 9])), 0.0);
        let p = img(2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(tv_seminorm(&p), 2.0);
        assert_eq!(tv_seminorm(&p.scaled(-3.0)), 6.0);
    }

    #[test]
    fn subgradient_of_constant_is_zero() {
        let g = tv_subgradient(&img(3, &[1.5; 9]));
        assert!(g.values.iter().all(|&v| v == 0.0));
    }
}
