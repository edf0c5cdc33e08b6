//! Discrete acoustic model of a ring transducer array.
//!
//! Every pixel is treated as a point source. Its pressure reaches element `e`
//! after the time of flight `d / c`, which lands between two samples; the
//! pixel value is split across those two samples by linear interpolation.
//! The resulting sparse matrix maps an image to a sinogram
//! (`n_elements x n_samples`). Its transpose, normalised by the number of
//! live channels, is delay-and-sum.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image_ops;

/// Fractional tap offsets are snapped to multiples of `2^-FRAC_BITS` so both
/// interpolation weights are exact in `f32` and sum to exactly one.
const FRAC_BITS: i32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingGeometry {
    pub n_elements: usize,
    pub radius_m: f64,
    pub fs_hz: f64,
    pub n_samples: usize,
    pub sound_speed_mps: f64,
    #[serde(default)]
    pub t0_s: f64,
}

impl Default for RingGeometry {
    fn default() -> Self {
        Self::desk()
    }
}

impl RingGeometry {
    /// Scaled-down ring used for tests and desk experiments.
    pub fn desk() -> Self {
        Self {
            n_elements: 64,
            radius_m: 0.025,
            fs_hz: 10e6,
            n_samples: 512,
            sound_speed_mps: 1513.0,
            t0_s: 0.0,
        }
    }

    /// The 512-element, 50 mm, 40 MHz system.
    pub fn full_scale() -> Self {
        Self {
            n_elements: 512,
            radius_m: 0.05,
            fs_hz: 40e6,
            n_samples: 2000,
            sound_speed_mps: 1513.0,
            t0_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidGeometry(m.to_string()));
        if self.n_elements < 4 {
            return bad("need at least 4 elements");
        }
        if self.n_samples < 8 {
            return bad("need at least 8 samples");
        }
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return bad("radius must be positive");
        }
        if !(self.sound_speed_mps > 0.0 && self.sound_speed_mps.is_finite()) {
            return bad("sound speed must be positive");
        }
        if !(self.fs_hz > 0.0 && self.fs_hz.is_finite()) {
            return bad("sampling rate must be positive");
        }
        if !self.t0_s.is_finite() {
            return bad("t0 must be finite");
        }
        Ok(())
    }

    /// Position of element `k`, at angle `2 pi k / n` on the ring.
    ///
    /// When `n` is a multiple of four the position is derived from the first
    /// quadrant by exact quarter turns, so the element layout is exactly
    /// invariant under 90 degree rotations.
    pub fn element_position(&self, k: usize) -> (f64, f64) {
        let n = self.n_elements;
        let r = self.radius_m;
        if n % 4 == 0 {
            let q = n / 4;
            let (quadrant, j) = (k / q, k % q);
            let a = 2.0 * PI * j as f64 / n as f64;
            let (x, y) = if j == 0 { (r, 0.0) } else { (r * a.cos(), r * a.sin()) };
            match quadrant % 4 {
                0 => (x, y),
                1 => (-y, x),
                2 => (-x, -y),
                _ => (y, -x),
            }
        } else {
            let a = 2.0 * PI * k as f64 / n as f64;
            (r * a.cos(), r * a.sin())
        }
    }

    /// Fractional sample index at which a source at distance `d` arrives.
    pub fn sample_index(&self, d: f64) -> f64 {
        (d / self.sound_speed_mps - self.t0_s) * self.fs_hz
    }
}

/// Square pixel grid centred on the ring centre. Row 0 is the top (+y) edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    pub pitch_m: f64,
}

impl Default for ImageGrid {
    fn default() -> Self {
        Self::desk()
    }
}

impl ImageGrid {
    pub fn new(n: usize, pitch_m: f64) -> Self {
        Self {
            nx: n,
            ny: n,
            pitch_m,
        }
    }

    /// 64 x 64 pixels over a 20 mm field of view.
    pub fn desk() -> Self {
        Self::new(64, 0.02 / 64.0)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn half_diagonal(&self) -> f64 {
        let hx = self.nx as f64 * self.pitch_m / 2.0;
        let hy = self.ny as f64 * self.pitch_m / 2.0;
        (hx * hx + hy * hy).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(CoreError::InvalidGrid("grid has no pixels".into()));
        }
        if self.nx != self.ny {
            return Err(CoreError::InvalidGrid(format!("grid must be square, got {}x{}", self.nx, self.ny)));
        }
        if !(self.pitch_m > 0.0 && self.pitch_m.is_finite()) {
            return Err(CoreError::InvalidGrid("pitch must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_in(&self, geometry: &RingGeometry) -> Result<()> {
        self.validate()?;
        let hd = self.half_diagonal();
        if hd >= geometry.radius_m {
            return Err(CoreError::GridOutsideRing {
                half_diagonal_m: hd,
                radius_m: geometry.radius_m,
            });
        }
        Ok(())
    }

    /// Physical centre of pixel (`row`, `col`).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let cx = (self.nx as f64 - 1.0) / 2.0;
        let cy = (self.ny as f64 - 1.0) / 2.0;
        ((col as f64 - cx) * self.pitch_m, (cy - row as f64) * self.pitch_m)
    }
}

/// Initial-pressure image on an [`ImageGrid`], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageField {
    pub grid: ImageGrid,
    pub values: Vec<f64>,
}

impl ImageField {
    pub fn zeros(grid: ImageGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn new(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.ny,
                grid.nx
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.nx + col]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * a).collect(),
        }
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.grid.nx, best % self.grid.nx)
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Channel-by-time measurements, row `e` holding element `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: RingGeometry,
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: RingGeometry) -> Self {
        Self {
            geometry,
            data: vec![0.0; geometry.n_elements * geometry.n_samples],
        }
    }

    pub fn new(geometry: RingGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.n_elements * geometry.n_samples {
            return Err(CoreError::ShapeMismatch(format!(
                "{} values for {} channels x {} samples",
                data.len(),
                geometry.n_elements,
                geometry.n_samples
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn channel(&self, e: usize) -> &[f64] {
        let ns = self.geometry.n_samples;
        &self.data[e * ns..(e + 1) * ns]
    }

    pub fn channel_mut(&mut self, e: usize) -> &mut [f64] {
        let ns = self.geometry.n_samples;
        &mut self.data[e * ns..(e + 1) * ns]
    }

    /// Channels that are not identically zero.
    pub fn live_channels(&self) -> usize {
        (0..self.geometry.n_elements)
            .filter(|&e| self.channel(e).iter().any(|&v| v != 0.0))
            .count()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// The two interpolation taps `(first_sample, w_first, w_second)` for a
/// source at fractional sample `s`; `w_first + w_second == 1` exactly.
fn taps(s: f64) -> (usize, f64, f64) {
    let base = s.floor();
    let scale = (1u64 << FRAC_BITS) as f64;
    let q = ((s - base) * scale).round();
    let (i0, q) = if q >= scale { (base + 1.0, 0.0) } else { (base, q) };
    let w1 = q / scale;
    (i0 as usize, 1.0 - w1, w1)
}

fn tof_sample(geometry: &RingGeometry, element: (f64, f64), pixel: (f64, f64)) -> f64 {
    let dx = element.0 - pixel.0;
    let dy = element.1 - pixel.1;
    geometry.sample_index((dx * dx + dy * dy).sqrt())
}

/// Checks a fractional sample index against the window; both taps must fit.
fn check_window(geometry: &RingGeometry, element: usize, pixel: usize, s: f64) -> Result<()> {
    if !(s >= 0.0 && s <= (geometry.n_samples - 2) as f64) {
        return Err(CoreError::TimeWindowTooShort {
            element,
            pixel,
            sample: s,
            n_samples: geometry.n_samples,
        });
    }
    Ok(())
}

/// Sparse forward operator in compressed-row form. Row `e * n_samples + t`
/// is sample `t` of element `e`; column `row * nx + col` is a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrix {
    geometry: RingGeometry,
    grid: ImageGrid,
    amplitude_decay: bool,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    weights: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct OperatorFooter {
    geometry: RingGeometry,
    grid: ImageGrid,
    amplitude_decay: bool,
}

const SYSM_MAGIC: &[u8; 16] = b"PACTSYSM\0\0\0\0\0\0\0\0";

impl SystemMatrix {
    /// Builds the unit-amplitude operator.
    pub fn build(geometry: &RingGeometry, grid: &ImageGrid) -> Result<Self> {
        Self::build_with(geometry, grid, false)
    }

    /// With `amplitude_decay`, each tap is additionally scaled by
    /// `d_min / d` (spherical spreading relative to the closest possible
    /// source), which keeps weights in `[0, 1]`.
    pub fn build_with(geometry: &RingGeometry, grid: &ImageGrid, amplitude_decay: bool) -> Result<Self> {
        geometry.validate()?;
        grid.validate_in(geometry)?;
        let (ne, ns) = (geometry.n_elements, geometry.n_samples);
        let npix = grid.len();
        let d_min = geometry.radius_m - grid.half_diagonal();
        let pixels: Vec<(f64, f64)> = (0..npix)
            .map(|q| grid.pixel_center(q / grid.nx, q % grid.nx))
            .collect();

        let mut row_offsets = Vec::with_capacity(ne * ns + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::with_capacity(2 * ne * npix);
        let mut weights = Vec::with_capacity(2 * ne * npix);
        let mut buckets: Vec<Vec<(u32, f32)>> = vec![Vec::new(); ns];
        for e in 0..ne {
            let pos = geometry.element_position(e);
            for (q, &px) in pixels.iter().enumerate() {
                let s = tof_sample(geometry, pos, px);
                check_window(geometry, e, q, s)?;
                let (i0, w0, w1) = taps(s);
                let amp = if amplitude_decay {
                    let dx = pos.0 - px.0;
                    let dy = pos.1 - px.1;
                    d_min / (dx * dx + dy * dy).sqrt()
                } else {
                    1.0
                };
                if w0 != 0.0 {
                    buckets[i0].push((q as u32, (w0 * amp) as f32));
                }
                if w1 != 0.0 {
                    buckets[i0 + 1].push((q as u32, (w1 * amp) as f32));
                }
            }
            for b in buckets.iter_mut() {
                for &(c, w) in b.iter() {
                    col_indices.push(c);
                    weights.push(w);
                }
                row_offsets.push(col_indices.len());
                b.clear();
            }
        }
        Ok(Self {
            geometry: *geometry,
            grid: *grid,
            amplitude_decay,
            row_offsets,
            col_indices,
            weights,
        })
    }

    pub fn geometry(&self) -> &RingGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn amplitude_decay(&self) -> bool {
        self.amplitude_decay
    }

    pub fn rows(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.grid.len()
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    /// `(column, weight)` entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_offsets[r], self.row_offsets[r + 1]);
        self.col_indices[a..b]
            .iter()
            .zip(&self.weights[a..b])
            .map(|(&c, &w)| (c as usize, w as f64))
    }

    /// `y = A x` on raw buffers.
    pub fn apply<T: Float>(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols());
        debug_assert_eq!(y.len(), self.rows());
        for (r, out) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_offsets[r], self.row_offsets[r + 1]);
            let mut acc = T::zero();
            for k in a..b {
                acc = acc + T::from(self.weights[k]).unwrap() * x[self.col_indices[k] as usize];
            }
            *out = acc;
        }
    }

    /// `x = A^T y` on raw buffers.
    pub fn apply_adjoint<T: Float>(&self, y: &[T], x: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols());
        debug_assert_eq!(y.len(), self.rows());
        x.iter_mut().for_each(|v| *v = T::zero());
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[k] as usize;
                x[c] = x[c] + T::from(self.weights[k]).unwrap() * yr;
            }
        }
    }

    pub fn forward_project(&self, p: &ImageField) -> Result<Sinogram> {
        if p.grid != self.grid {
            return Err(CoreError::ShapeMismatch("image grid differs from the operator grid".into()));
        }
        let mut y = Sinogram::zeros(self.geometry);
        self.apply(&p.values, &mut y.data);
        Ok(y)
    }

    pub fn adjoint_project(&self, y: &Sinogram) -> Result<ImageField> {
        if y.geometry != self.geometry {
            return Err(CoreError::ShapeMismatch("sinogram geometry differs from the operator geometry".into()));
        }
        let mut p = ImageField::zeros(self.grid);
        self.apply_adjoint(&y.data, &mut p.values);
        Ok(p)
    }

    /// Largest eigenvalue of `A^T A` by power iteration from a constant start.
    pub fn operator_norm_sq(&self, iterations: usize) -> f64 {
        let mut x = vec![1.0 / (self.cols() as f64).sqrt(); self.cols()];
        let mut y = vec![0.0; self.rows()];
        let mut lambda = 0.0;
        for _ in 0..iterations {
            self.apply(&x, &mut y);
            self.apply_adjoint(&y, &mut x);
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return 0.0;
            }
            lambda = n;
            x.iter_mut().for_each(|v| *v /= n);
        }
        lambda
    }

    // ---- persistence -------------------------------------------------------

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(40 + 8 * self.row_offsets.len() + 8 * self.nnz());
        buf.extend_from_slice(SYSM_MAGIC);
        for v in [self.rows(), self.cols(), self.nnz()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &o in &self.row_offsets {
            buf.extend_from_slice(&(o as u64).to_le_bytes());
        }
        for &c in &self.col_indices {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for &w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        serde_json::to_writer(
            &mut buf,
            &OperatorFooter {
                geometry: self.geometry,
                grid: self.grid,
                amplitude_decay: self.amplitude_decay,
            },
        )?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| CoreError::CorruptFile(format!("system matrix: {m}"));
        if bytes.len() < 40 || &bytes[..16] != SYSM_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        let (rows, cols, nnz) = (u64_at(16), u64_at(24), u64_at(32));
        let offsets_end = 40usize
            .checked_add(rows.checked_add(1).and_then(|r| r.checked_mul(8)).ok_or_else(|| corrupt("row count"))?)
            .ok_or_else(|| corrupt("row count"))?;
        let cols_end = offsets_end.checked_add(nnz.checked_mul(4).ok_or_else(|| corrupt("nnz"))?).ok_or_else(|| corrupt("nnz"))?;
        let weights_end = cols_end + 4 * nnz;
        if bytes.len() < weights_end {
            return Err(corrupt("truncated"));
        }
        let row_offsets: Vec<usize> = bytes[40..offsets_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let col_indices: Vec<u32> = bytes[offsets_end..cols_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let weights: Vec<f32> = bytes[cols_end..weights_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let footer: OperatorFooter =
            serde_json::from_slice(&bytes[weights_end..]).map_err(|e| corrupt(&format!("footer: {e}")))?;
        if rows != footer.geometry.n_elements * footer.geometry.n_samples || cols != footer.grid.len() {
            return Err(corrupt("counts disagree with footer geometry"));
        }
        if row_offsets.first() != Some(&0)
            || row_offsets.last() != Some(&nnz)
            || row_offsets.windows(2).any(|w| w[0] > w[1])
            || col_indices.iter().any(|&c| c as usize >= cols)
        {
            return Err(corrupt("inconsistent index arrays"));
        }
        Ok(Self {
            geometry: footer.geometry,
            grid: footer.grid,
            amplitude_decay: footer.amplitude_decay,
            row_offsets,
            col_indices,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Delay-and-sum: for every pixel, average the linearly interpolated channel
/// values at its time of flight over the live channels.
///
/// Evaluated directly from the geometry; numerically it equals
/// `A^T y / n_valid` (see [`das_with_operator`]).
pub fn das_reconstruct(geometry: &RingGeometry, grid: &ImageGrid, y: &Sinogram) -> Result<ImageField> {
    geometry.validate()?;
    grid.validate_in(geometry)?;
    if y.geometry != *geometry {
        return Err(CoreError::ShapeMismatch("sinogram geometry differs from the requested geometry".into()));
    }
    let live: Vec<usize> = (0..geometry.n_elements)
        .filter(|&e| y.channel(e).iter().any(|&v| v != 0.0))
        .collect();
    if live.is_empty() {
        return Err(CoreError::AllChannelsMasked);
    }
    let positions: Vec<(f64, f64)> = live.iter().map(|&e| geometry.element_position(e)).collect();
    let inv = 1.0 / live.len() as f64;
    let mut out = ImageField::zeros(*grid);
    for (q, v) in out.values.iter_mut().enumerate() {
        let px = grid.pixel_center(q / grid.nx, q % grid.nx);
        let mut acc = 0.0;
        for (&e, &pos) in live.iter().zip(&positions) {
            let s = tof_sample(geometry, pos, px);
            check_window(geometry, e, q, s)?;
            let (i0, w0, w1) = taps(s);
            let ch = y.channel(e);
            acc += w0 * ch[i0] + w1 * ch[i0 + 1];
        }
        *v = acc * inv;
    }
    Ok(out)
}

/// Delay-and-sum through an already built operator: `A^T y / n_valid`.
pub fn das_with_operator(a: &SystemMatrix, y: &Sinogram) -> Result<ImageField> {
    let live = y.live_channels();
    if live == 0 {
        return Err(CoreError::AllChannelsMasked);
    }
    let mut p = a.adjoint_project(y)?;
    let inv = 1.0 / live as f64;
    p.values.iter_mut().for_each(|v| *v *= inv);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    Tv,
    Wavelet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterativeConfig {
    pub regularizer: Regularizer,
    pub reg_weight: f64,
    pub n_steps: usize,
    /// Initial step, in units of `1 / ||A||^2`.
    pub step0: f64,
    /// Halve the step after this many iterations; `None` keeps it fixed.
    pub halve_every: Option<usize>,
    pub wavelet_levels: usize,
}

impl IterativeConfig {
    pub fn tv() -> Self {
        Self {
            regularizer: Regularizer::Tv,
            reg_weight: 0.0005,
            n_steps: 500,
            step0: 0.5,
            halve_every: Some(100),
            wavelet_levels: 2,
        }
    }

    pub fn wavelet() -> Self {
        Self {
            regularizer: Regularizer::Wavelet,
            reg_weight: 0.0002,
            ..Self::tv()
        }
    }

    /// Step size used at iteration `k` (before operator-norm scaling).
    pub fn step_at(&self, k: usize) -> f64 {
        match self.halve_every {
            Some(n) if n > 0 => self.step0 / 2f64.powi((k / n) as i32),
            _ => self.step0,
        }
    }
}

/// Result of [`iterative_reconstruct`] with the per-iteration objective.
#[derive(Debug, Clone)]
pub struct IterativeOutcome {
    pub image: ImageField,
    /// `0.5 ||A p - y||^2` before each step, plus the final value.
    pub data_term: Vec<f64>,
    /// Data term plus the weighted regulariser, same indexing.
    pub objective: Vec<f64>,
}

/// Minimises `0.5 ||A p - y||^2 + lambda R(p)` from a zero image.
///
/// TV uses plain subgradient descent; the wavelet penalty uses a gradient
/// step followed by soft thresholding of the Haar coefficients. Step sizes
/// are `step_at(k) / ||A||^2`.
pub fn iterative_reconstruct(a: &SystemMatrix, y: &Sinogram, cfg: &IterativeConfig) -> Result<IterativeOutcome> {
    if cfg.n_steps == 0 || !(cfg.step0 > 0.0) || !(cfg.reg_weight >= 0.0) {
        return Err(CoreError::InvalidArgument(
            "iterative reconstruction needs n_steps >= 1, step0 > 0 and reg_weight >= 0".into(),
        ));
    }
    if y.geometry != a.geometry {
        return Err(CoreError::ShapeMismatch("sinogram geometry differs from the operator geometry".into()));
    }
    let lipschitz = a.operator_norm_sq(50).max(f64::MIN_POSITIVE);
    let grid = a.grid;
    let mut p = ImageField::zeros(grid);
    let mut resid = vec![0.0; a.rows()];
    let mut grad = vec![0.0; a.cols()];
    let mut data_term = Vec::with_capacity(cfg.n_steps + 1);
    let mut objective = Vec::with_capacity(cfg.n_steps + 1);

    let reg_value = |p: &ImageField| -> Result<f64> {
        Ok(match cfg.regularizer {
            Regularizer::Tv => image_ops::tv_seminorm(p),
            Regularizer::Wavelet => image_ops::dwt_forward(p, cfg.wavelet_levels)?.l1_norm(),
        })
    };

    for k in 0..=cfg.n_steps {
        a.apply(&p.values, &mut resid);
        for (r, &yv) in resid.iter_mut().zip(&y.data) {
            *r -= yv;
        }
        let dt = 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
        let obj = dt + cfg.reg_weight * reg_value(&p)?;
        if !obj.is_finite() {
            return Err(CoreError::Divergence(k));
        }
        data_term.push(dt);
        objective.push(obj);
        if k == cfg.n_steps {
            break;
        }
        let tau = cfg.step_at(k) / lipschitz;
        a.apply_adjoint(&resid, &mut grad);
        match cfg.regularizer {
            Regularizer::Tv => {
                let sub = image_ops::tv_subgradient(&p);
                for ((v, g), s) in p.values.iter_mut().zip(&grad).zip(&sub.values) {
                    *v -= tau * (g + cfg.reg_weight * s);
                }
            }
            Regularizer::Wavelet => {
                for (v, g) in p.values.iter_mut().zip(&grad) {
                    *v -= tau * g;
                }
                let mut c = image_ops::dwt_forward(&p, cfg.wavelet_levels)?;
                c.soft_threshold(tau * cfg.reg_weight);
                p = image_ops::dwt_inverse(&c);
            }
        }
    }
    Ok(IterativeOutcome {
        image: p,
        data_term,
        objective,
    })
}
