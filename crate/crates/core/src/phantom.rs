//! Synthetic phantoms, simulated measurements and the dataset container.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acoustic::{ImageField, ImageGrid, RingGeometry, Sinogram, SystemMatrix};
use crate::error::{CoreError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Discs,
    Rings,
    BranchingVessels,
    /// A weak body disc holding discs, rings and a vessel tree.
    Mixed,
}

/// Radii are fractions of the grid's inscribed radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            kind: PhantomKind::Mixed,
            count_min: 2,
            count_max: 4,
            radius_min: 0.08,
            radius_max: 0.25,
            intensity_min: 0.5,
            intensity_max: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::UnplaceableShape(m.to_string()));
        if self.count_max == 0 || self.count_min > self.count_max {
            return bad("count range must contain a positive count");
        }
        if !(0.0 <= self.intensity_min && self.intensity_min <= self.intensity_max && self.intensity_max <= 1.0) {
            return bad("intensities must satisfy 0 <= min <= max <= 1");
        }
        if !(0.0 < self.radius_min && self.radius_min <= self.radius_max && self.radius_max < 1.0) {
            return bad("radii must satisfy 0 < min <= max < 1");
        }
        Ok(())
    }
}

const MAX_TRIES: usize = 200;

/// Rasteriser in pixel coordinates; `(x, y)` = (column, row).
struct Canvas {
    n: usize,
    values: Vec<f64>,
    center: f64,
    /// Radius of the inscribed circle, one pixel of margin removed.
    r_in: f64,
}

impl Canvas {
    fn new(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
            center: (n as f64 - 1.0) / 2.0,
            r_in: n as f64 / 2.0 - 1.0,
        }
    }

    fn fits(&self, x: f64, y: f64, r: f64) -> bool {
        let d = ((x - self.center).powi(2) + (y - self.center).powi(2)).sqrt();
        d + r <= self.r_in
    }

    fn paint(&mut self, inside: impl Fn(f64, f64) -> bool, v: f64) {
        for i in 0..self.n {
            for j in 0..self.n {
                if inside(j as f64, i as f64) {
                    let p = &mut self.values[i * self.n + j];
                    *p = p.max(v);
                }
            }
        }
    }

    fn disc(&mut self, x: f64, y: f64, r: f64, v: f64) {
        self.paint(|px, py| (px - x).powi(2) + (py - y).powi(2) <= r * r, v);
    }

    fn ring(&mut self, x: f64, y: f64, r: f64, v: f64) {
        let inner = 0.6 * r;
        self.paint(
            |px, py| {
                let d2 = (px - x).powi(2) + (py - y).powi(2);
                d2 <= r * r && d2 >= inner * inner
            },
            v,
        );
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64, v: f64) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        self.paint(
            |px, py| {
                let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
                (px - qx).powi(2) + (py - qy).powi(2) <= half_width * half_width
            },
            v,
        );
    }

    /// Random point whose disc of radius `r` fits within `within` (centre,
    /// radius) and the inscribed circle.
    fn place(&self, rng: &mut rng::Rng, r: f64, within: Option<(f64, f64, f64)>) -> Option<(f64, f64)> {
        // Uniform over the disc of admissible centres.
        let (cx, cy, slack) = match within {
            Some((bx, by, br)) => (bx, by, br - r),
            None => (self.center, self.center, self.r_in - r),
        };
        if slack < 0.0 {
            return None;
        }
        for _ in 0..MAX_TRIES {
            let rho = slack * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (x, y) = (cx + rho * phi.cos(), cy + rho * phi.sin());
            if self.fits(x, y, r) {
                return Some((x, y));
            }
        }
        None
    }

    fn vessel_tree(&mut self, rng: &mut rng::Rng, within: Option<(f64, f64, f64)>, v: f64) -> bool {
        let hw = 0.8;
        let len0 = self.r_in * 0.35;
        let ok = |c: &Canvas, p: (f64, f64)| {
            c.fits(p.0, p.1, hw)
                && within
                    .map(|(bx, by, br)| ((p.0 - bx).powi(2) + (p.1 - by).powi(2)).sqrt() + hw <= br)
                    .unwrap_or(true)
        };
        // The trunk must fit; branches that leave the allowed region are dropped.
        let mut trunk = None;
        for _ in 0..MAX_TRIES {
            let Some(start) = self.place(rng, hw, within) else {
                return false;
            };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            if ok(self, (start.0 + len0 * angle.cos(), start.1 + len0 * angle.sin())) {
                trunk = Some((start, angle));
                break;
            }
        }
        let Some((start, angle)) = trunk else {
            return false;
        };
        let mut stack = vec![(start, angle, len0, 0u32)];
        while let Some((p, angle, len, depth)) = stack.pop() {
            let end = (p.0 + len * angle.cos(), p.1 + len * angle.sin());
            if !ok(self, end) {
                continue;
            }
            self.segment(p, end, hw, v);
            if depth < 2 {
                let spread = rng.random_range(0.3..0.8);
                stack.push((end, angle + spread, len * 0.7, depth + 1));
                stack.push((end, angle - spread, len * 0.7, depth + 1));
            }
        }
        true
    }
}

/// Deterministic phantom for `spec.seed`, values in `[0, 1]`.
pub fn generate_phantom(spec: &PhantomSpec, grid: &ImageGrid) -> Result<ImageField> {
    spec.validate()?;
    grid.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let mut c = Canvas::new(grid.nx);
    let count = rng.random_range(spec.count_min..=spec.count_max).max(1);
    let intensity = |rng: &mut rng::Rng| {
        if spec.intensity_min == spec.intensity_max {
            spec.intensity_max
        } else {
            rng.random_range(spec.intensity_min..=spec.intensity_max)
        }
    };
    let radius = |rng: &mut rng::Rng, r_in: f64| {
        let f = if spec.radius_min == spec.radius_max {
            spec.radius_min
        } else {
            rng.random_range(spec.radius_min..=spec.radius_max)
        };
        f * r_in
    };
    let fail = || CoreError::UnplaceableShape(format!("{:?} shape does not fit after {} tries", spec.kind, MAX_TRIES));

    let body = if spec.kind == PhantomKind::Mixed {
        let br = rng.random_range(0.75..0.92) * c.r_in;
        let (bx, by) = c.place(&mut rng, br, None).ok_or_else(fail)?;
        let bv = rng.random_range(0.15..0.35);
        c.disc(bx, by, br, bv);
        Some((bx, by, br))
    } else {
        None
    };

    for k in 0..count {
        let v = intensity(&mut rng);
        let shape = match spec.kind {
            PhantomKind::Discs => 0,
            PhantomKind::Rings => 1,
            PhantomKind::BranchingVessels => 2,
            PhantomKind::Mixed => k % 2,
        };
        if shape == 2 {
            if !c.vessel_tree(&mut rng, body, v) {
                return Err(fail());
            }
            continue;
        }
        let r = radius(&mut rng, c.r_in);
        let (x, y) = c.place(&mut rng, r, body).ok_or_else(fail)?;
        if shape == 0 {
            c.disc(x, y, r, v);
        } else {
            c.ring(x, y, r, v);
        }
    }
    if spec.kind == PhantomKind::Mixed {
        let v = intensity(&mut rng);
        if !c.vessel_tree(&mut rng, body, v) {
            return Err(fail());
        }
    }
    if c.values.iter().all(|&v| v == 0.0) {
        return Err(CoreError::UnplaceableShape("phantom rendered empty".into()));
    }
    ImageField::new(*grid, c.values)
}

/// `y = A p + noise`, with white Gaussian noise rescaled so that
/// `10 log10(||A p||^2 / ||noise||^2)` equals `snr_db` exactly.
/// An infinite SNR, or an all-zero clean signal, gives `y = A p`.
pub fn simulate_measurement(a: &SystemMatrix, p: &ImageField, snr_db: f64, seed: u64) -> Result<Sinogram> {
    if snr_db.is_nan() {
        return Err(CoreError::ShapeMismatch("snr_db must not be NaN".into()));
    }
    let mut y = a.forward_project(p)?;
    let signal = y.energy();
    if snr_db == f64::INFINITY || signal == 0.0 {
        return Ok(y);
    }
    let mut rng = rng::seeded(seed);
    let noise: Vec<f64> = (0..y.data.len()).map(|_| rng.sample(StandardNormal)).collect();
    let raw: f64 = noise.iter().map(|v| v * v).sum();
    let target = signal / 10f64.powf(snr_db / 10.0);
    let s = (target / raw).sqrt();
    for (v, n) in y.data.iter_mut().zip(&noise) {
        *v += s * n;
    }
    Ok(y)
}

// ---- dataset ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u32 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub phantom: ImageField,
    pub clean: Sinogram,
    pub noisy: Sinogram,
}

/// Slices sharing one geometry and grid. Payloads are single precision; the
/// in-memory values are exactly the stored `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: RingGeometry,
    pub grid: ImageGrid,
    /// `+inf` for noise-free data.
    pub snr_db: f64,
    pub split: Split,
    pub seed: u64,
    pub phantom: Option<PhantomSpec>,
    pub entries: Vec<DatasetEntry>,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Generates `n` slices. Slice `i` uses phantom and noise streams derived
/// from `(seed, split, i)`, so slices are independent of `n`.
pub fn generate_dataset(
    a: &SystemMatrix,
    spec: &PhantomSpec,
    n: usize,
    snr_db: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = rng::stream(seed, rng::stream_id(split.tag(), i as u64));
        let phantom_seed: u64 = s.random();
        let noise_seed: u64 = s.random();
        let pspec = PhantomSpec {
            seed: phantom_seed,
            ..spec.clone()
        };
        let mut phantom = generate_phantom(&pspec, a.grid())?;
        round_f32(&mut phantom.values);
        let mut clean = a.forward_project(&phantom)?;
        let mut noisy = simulate_measurement(a, &phantom, snr_db, noise_seed)?;
        round_f32(&mut clean.data);
        round_f32(&mut noisy.data);
        entries.push(DatasetEntry { phantom, clean, noisy });
    }
    Ok(Dataset {
        geometry: *a.geometry(),
        grid: *a.grid(),
        snr_db,
        split,
        seed,
        phantom: Some(spec.clone()),
        entries,
    })
}

pub const DATASET_MAGIC: &[u8; 8] = b"PACTDSET";
pub const DATASET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    geometry: RingGeometry,
    grid: ImageGrid,
    /// `null` means noise-free.
    snr_db: Option<f64>,
    split: Split,
    seed: u64,
    phantom: Option<PhantomSpec>,
    n_records: usize,
}

fn push_f32(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Realised SNR averaged over slices, in dB.
    pub fn realized_snr_db(&self) -> f64 {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter_map(|e| {
                let s = e.clean.energy();
                let n: f64 = e.noisy.data.iter().zip(&e.clean.data).map(|(a, b)| (a - b) * (a - b)).sum();
                (s > 0.0 && n > 0.0).then(|| 10.0 * (s / n).log10())
            })
            .collect();
        if vals.is_empty() {
            f64::INFINITY
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DatasetHeader {
            geometry: self.geometry,
            grid: self.grid,
            snr_db: self.snr_db.is_finite().then_some(self.snr_db),
            split: self.split,
            seed: self.seed,
            phantom: self.phantom.clone(),
            n_records: self.entries.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for e in &self.entries {
            let start = buf.len();
            push_f32(&mut buf, &e.phantom.values);
            push_f32(&mut buf, &e.clean.data);
            push_f32(&mut buf, &e.noisy.data);
            let crc = crc32fast::hash(&buf[start..]);
            buf.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| CoreError::CorruptFile(format!("dataset: {m}"));
        if bytes.len() < 14 || &bytes[..8] != DATASET_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != DATASET_VERSION {
            return Err(CoreError::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let hjson = bytes.get(14..14 + hlen).ok_or_else(|| corrupt("truncated header".into()))?;
        let h: DatasetHeader = serde_json::from_slice(hjson).map_err(|e| corrupt(format!("header: {e}")))?;
        h.geometry.validate()?;
        h.grid.validate()?;
        let npix = h.grid.len();
        let nsino = h.geometry.n_elements * h.geometry.n_samples;
        let rec = 4 * (npix + 2 * nsino);
        let mut off = 14 + hlen;
        let mut entries = Vec::with_capacity(h.n_records);
        let read = |raw: &[u8]| -> Vec<f64> {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        for i in 0..h.n_records {
            let body = bytes
                .get(off..off + rec)
                .ok_or_else(|| corrupt(format!("truncated at record {i}")))?;
            let crc = bytes
                .get(off + rec..off + rec + 4)
                .ok_or_else(|| corrupt(format!("truncated at record {i}")))?;
            if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
                return Err(corrupt(format!("CRC mismatch in record {i}")));
            }
            entries.push(DatasetEntry {
                phantom: ImageField::new(h.grid, read(&body[..4 * npix]))?,
                clean: Sinogram::new(h.geometry, read(&body[4 * npix..4 * (npix + nsino)]))?,
                noisy: Sinogram::new(h.geometry, read(&body[4 * (npix + nsino)..]))?,
            });
            off += rec + 4;
        }
        if off != bytes.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(Self {
            geometry: h.geometry,
            grid: h.grid,
            snr_db: h.snr_db.unwrap_or(f64::INFINITY),
            split: h.split,
            seed: h.seed,
            phantom: h.phantom,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
