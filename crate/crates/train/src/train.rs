//! Training loops: self-supervised CDSS and the supervised baselines.

use std::cell::Cell;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use pact_autodiff::optim::AdamW;
use pact_autodiff::{checkpoint, Graph, LinearMap, Real, Tensor, Var};
use pact_core::acoustic::das_with_operator;
use pact_core::phantom::Dataset;
use pact_core::{rng, ImageField, Sinogram, SystemMatrix};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::ifunet::{self, Bound, IFUnetConfig, IFUnetParams};
use crate::losses::{self, LossComponents, LossVars, LossWeights};
use crate::masks::{apply_mask, even_channels, sample_masks, ChannelMask};
use crate::operators::{FiniteDifference, Haar, Projector, Rotate, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Cdss,
    Supervised,
    SupervisedMasked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    /// One of the four quarter turns, drawn per batch.
    Exact90,
    /// A uniform angle in `[0, 2 pi)` with bilinear resampling.
    Bilinear,
}

/// Treat `p1` as a fixed target inside the consistency terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopGradient {
    #[serde(default)]
    pub mic_p1: bool,
    #[serde(default)]
    pub mdc_p1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Fraction of channels dropped by the first mask.
    pub masking_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rotation: RotationMode,
    pub weights: LossWeights,
    pub wavelet_levels: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub model: IFUnetConfig,
    #[serde(default)]
    pub stop_gradient: StopGradient,
    /// Cut the equivariance branch off from `p1`'s graph.
    #[serde(default)]
    pub ei_detach: bool,
    /// Fixed evenly spaced input channels for `supervised` mode.
    #[serde(default)]
    pub even_channels: Option<usize>,
    /// Gain applied to every delay-and-sum network input; `None` derives it
    /// from the operator (see [`derive_input_scale`]).
    #[serde(default)]
    pub input_scale: Option<f64>,
    /// When false the history's `wall_seconds` column is written as 0 so the
    /// file is reproducible byte for byte.
    #[serde(default = "yes")]
    pub record_wall_time: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Cdss,
            masking_ratio: 0.5,
            batch_size: 32,
            epochs: 400,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            rotation: RotationMode::Exact90,
            weights: LossWeights::default(),
            wavelet_levels: 2,
            checkpoint_every: 0,
            model: IFUnetConfig::desk(),
            stop_gradient: StopGradient::default(),
            ei_detach: false,
            even_channels: None,
            input_scale: None,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Scaled-down protocol for 64 x 64 desk experiments.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            epochs: 100,
            model: IFUnetConfig::tiny(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.masking_ratio) {
            return bad(format!("masking_ratio {} outside [0, 1)", self.masking_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be > 0 and weight_decay >= 0".into());
        }
        if self.wavelet_levels == 0 {
            return bad("wavelet_levels must be at least 1".into());
        }
        if let Some(s) = self.input_scale {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("input_scale {s} must be finite and positive"));
            }
        }
        if self.mode == TrainMode::Supervised && self.even_channels.is_none() {
            return bad("supervised mode needs even_channels".into());
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Dataset view that counts every access to the ground-truth phantoms.
pub struct TrainData<'a> {
    dataset: &'a Dataset,
    ground_truth_reads: Cell<usize>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self {
            dataset,
            ground_truth_reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.dataset.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.entries.is_empty()
    }

    /// The noisy sinogram of slice `i`.
    pub fn measurement(&self, i: usize) -> &Sinogram {
        &self.dataset.entries[i].noisy
    }

    pub fn ground_truth(&self, i: usize) -> &ImageField {
        self.ground_truth_reads.set(self.ground_truth_reads.get() + 1);
        &self.dataset.entries[i].phantom
    }

    pub fn ground_truth_reads(&self) -> usize {
        self.ground_truth_reads.get()
    }

    fn check_operator(&self, a: &SystemMatrix) -> Result<()> {
        if self.dataset.geometry != *a.geometry() || self.dataset.grid != *a.grid() {
            return Err(TrainError::GeometryMismatch(
                "dataset geometry or grid differs from the operator".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub components: LossComponents,
    pub total: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub batches: usize,
    /// Batches on which `m1 * y + m2 * y == y` was verified.
    pub complement_checks: usize,
    pub ground_truth_reads: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: IFUnetParams<f32>,
    pub history: Vec<EpochRecord>,
    pub stats: TrainStats,
    pub input_scale: f64,
}

/// `1 / mean(DAS(A 1))`: scales delay-and-sum images of a unit-intensity
/// field to unit mean. Depends only on the operator.
pub fn derive_input_scale(a: &SystemMatrix) -> Result<f64> {
    let ones = ImageField::new(*a.grid(), vec![1.0; a.cols()])?;
    let y = a.forward_project(&ones)?;
    let das = das_with_operator(a, &y)?;
    let mean = das.values.iter().sum::<f64>() / das.values.len() as f64;
    Ok(1.0 / mean)
}

/// Scaled delay-and-sum image as `f32`.
pub fn das_input(a: &SystemMatrix, y: &Sinogram, scale: f64) -> Result<Vec<f32>> {
    let p = das_with_operator(a, y)?;
    Ok(p.values.iter().map(|v| (v * scale) as f32).collect())
}

/// Network reconstruction `M(scale * DAS(y))`.
pub fn reconstruct(
    params: &IFUnetParams<f32>,
    cfg: &IFUnetConfig,
    a: &SystemMatrix,
    y: &Sinogram,
    scale: f64,
) -> Result<ImageField> {
    let g = a.grid();
    let x = Tensor::new(&[1, 1, g.ny, g.nx], das_input(a, y, scale)?)?;
    let out = ifunet::predict(params, cfg, x)?;
    Ok(ImageField::new(*g, out.data().iter().map(|&v| v as f64).collect())?)
}

fn batch_stream(seed: u64, tag: u32, epoch: usize, batch: usize) -> rng::Rng {
    rng::stream(seed, rng::stream_id(tag, ((epoch as u64) << 24) | batch as u64))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::stream_id(1, epoch as u64)));
    order
}

/// Splits `[k * b, 1, N, N]` into `k` tensors of `[b, 1, N, N]`.
fn unstack(g: &mut Graph<f32>, x: Var, k: usize, b: usize) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[1, k * b, s[2], s[3]])?;
    (0..k)
        .map(|i| {
            let part = g.split(r, i * b, b)?;
            Ok(g.reshape(part, &[b, 1, s[2], s[3]])?)
        })
        .collect()
}

struct Session {
    params: IFUnetParams<f32>,
    optimizer: AdamW<f32>,
    history: Vec<EpochRecord>,
    stats: TrainStats,
    input_scale: f64,
}

impl Session {
    fn new(cfg: &TrainConfig, a: &SystemMatrix) -> Result<Self> {
        cfg.validate()?;
        let input_scale = match cfg.input_scale {
            Some(s) => s,
            None => derive_input_scale(a)?,
        };
        Ok(Self {
            params: ifunet::init_params(&cfg.model, cfg.seed)?,
            optimizer: AdamW::new(cfg.learning_rate, cfg.weight_decay),
            history: Vec::new(),
            stats: TrainStats::default(),
            input_scale,
        })
    }

    fn step(&mut self, g: &mut Graph<f32>, vars: &[Var], loss: Var) -> Result<()> {
        g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        self.optimizer.step(&mut self.params.tensors, &grads)?;
        Ok(())
    }

    fn finish_epoch(
        &mut self,
        cfg: &TrainConfig,
        epoch: usize,
        sums: LossComponents,
        total: f64,
        batches: usize,
        started: Instant,
        out: Option<&Path>,
    ) -> Result<()> {
        let k = 1.0 / batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            components: LossComponents {
                mdc: sums.mdc * k,
                mic: sums.mic * k,
                ei: sums.ei * k,
                dwt: sums.dwt * k,
                tv: sums.tv * k,
            },
            total: total * k,
            wall_seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}: total {:.6} (mdc {:.4} mic {:.4} ei {:.4} dwt {:.4} tv {:.4})",
            record.total,
            record.components.mdc,
            record.components.mic,
            record.components.ei,
            record.components.dwt,
            record.components.tv
        );
        self.history.push(record);
        if let Some(dir) = out {
            write_history(&dir.join("history.csv"), &self.history)?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join("checkpoint.pactckpt"), &self.params, cfg, self.input_scale, epoch)?;
            }
        }
        Ok(())
    }

    fn into_outcome(self, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out {
            save_checkpoint(&dir.join("model.pactckpt"), &self.params, cfg, self.input_scale, cfg.epochs)?;
        }
        Ok(TrainOutcome {
            params: self.params,
            history: self.history,
            stats: self.stats,
            input_scale: self.input_scale,
        })
    }
}

fn check_finite(c: &LossComponents, total: f64, epoch: usize, batch: usize) -> Result<()> {
    if let Some(term) = c.non_finite() {
        return Err(TrainError::NonFiniteLoss { term, epoch, batch });
    }
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            term: "total",
            epoch,
            batch,
        });
    }
    Ok(())
}

/// Live-channel count per batch item of a `[B, n_elements, n_samples]` tensor.
fn live_channels<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let s = t.shape();
    let (n_el, ns) = (s[1], s[2]);
    t.data()
        .chunks(n_el * ns)
        .map(|item| item.chunks(ns).filter(|ch| ch.iter().any(|&v| v != T::zero())).count())
        .collect()
}

/// The equivariance term: `p2 = R p1`, `p3 = M(scale * DAS(A p2))`, loss
/// `|p2 - p3|^2` averaged over the batch. `proj` must be the projector of
/// the operator the network was trained with.
pub fn equivariance_loss<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    model: &IFUnetConfig,
    proj: &Arc<dyn LinearMap<T>>,
    p1: Var,
    rotation: Rotation,
    input_scale: f64,
) -> Result<Var> {
    let s = g.shape(p1).to_vec();
    let rot: Arc<dyn LinearMap<T>> = Arc::new(Rotate { n: s[3], rotation });
    let p2 = g.linear(p1, rot, false)?;
    let ap2 = g.linear(p2, proj.clone(), false)?;
    let back = g.linear(ap2, proj.clone(), true)?;
    let factors = live_channels(g.value(ap2))
        .into_iter()
        .map(|c| T::lit(input_scale / c.max(1) as f64))
        .collect();
    let x3 = g.scale_items(back, factors)?;
    let x3 = g.reshape(x3, &s)?;
    let p3 = ifunet::forward(g, bound, model, x3)?;
    losses::loss_ei(g, p2, p3)
}

/// Self-supervised training from noisy sinograms only.
///
/// Each batch draws one complementary mask pair and one rotation, runs the
/// network on `DAS(y)`, `DAS(m1 y)` and `DAS(m2 y)` and minimises the
/// weighted sum of the mDC, mIC, EI, DWT and TV terms. Terms with zero
/// weight are skipped and logged as 0. With `out`, the history and
/// checkpoints are written there; a non-finite loss aborts the run and
/// leaves the last periodic checkpoint in place.
pub fn train_cdss(
    data: &TrainData,
    a: Arc<SystemMatrix>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    data.check_operator(&a)?;
    if data.is_empty() {
        return Err(TrainError::InvalidConfig("empty training set".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut s = Session::new(cfg, &a)?;
    let geometry = *a.geometry();
    let grid = *a.grid();
    let (n_el, ns, n) = (geometry.n_elements, geometry.n_samples, grid.nx);
    let npix = grid.len();
    let proj: Arc<dyn LinearMap<f32>> = Arc::new(Projector::new(a.clone()));
    let haar: Arc<dyn LinearMap<f32>> = Arc::new(Haar {
        n,
        levels: cfg.wavelet_levels,
    });
    let diff: Arc<dyn LinearMap<f32>> = Arc::new(FiniteDifference { nx: grid.nx, ny: grid.ny });
    let w = cfg.weights;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut sums = LossComponents::default();
        let mut total_sum = 0.0;
        let mut n_batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut rng = batch_stream(cfg.seed, 2, epoch, bi);
            let (m1, m2) = sample_masks(n_el, cfg.masking_ratio, &mut rng)?;
            let rotation = match cfg.rotation {
                RotationMode::Exact90 => Rotation::Exact90(rng.random_range(0..4)),
                RotationMode::Bilinear => Rotation::Bilinear(rng.random_range(0.0..std::f64::consts::TAU)),
            };

            let mut x = vec![0f32; 3 * b * npix];
            let mut yt = Vec::with_capacity(b * n_el * ns);
            for (k, &i) in chunk.iter().enumerate() {
                let y = data.measurement(i);
                let y1 = apply_mask(y, &m1)?;
                let y2 = apply_mask(y, &m2)?;
                if y1.data.iter().zip(&y2.data).zip(&y.data).any(|((u, v), t)| u + v != *t) {
                    return Err(TrainError::Invariant(format!("mask complement fails on slice {i}")));
                }
                for (set, src) in [y, &y1, &y2].into_iter().enumerate() {
                    let off = (set * b + k) * npix;
                    x[off..off + npix].copy_from_slice(&das_input(&a, src, s.input_scale)?);
                }
                yt.extend(y.data.iter().map(|&v| v as f32));
            }
            s.stats.complement_checks += 1;

            let mut g = Graph::<f32>::new();
            let bound = s.params.bind(&mut g);
            let vars = bound.ordered(&s.params);
            let xv = g.input(Tensor::new(&[3 * b, 1, n, n], x)?);
            let yv = g.input(Tensor::new(&[b, n_el, ns], yt)?);
            let out_all = ifunet::forward(&mut g, &bound, &cfg.model, xv)?;
            let parts = unstack(&mut g, out_all, 3, b)?;
            let (p1, ps1, ps2) = (parts[0], parts[1], parts[2]);

            let zero = g.input(Tensor::scalar(0.0));
            let mic = if w.mic > 0.0 {
                let p = if cfg.stop_gradient.mic_p1 { g.detach(p1) } else { p1 };
                losses::loss_mic(&mut g, p, ps1, ps2)?
            } else {
                zero
            };
            let mdc = if w.mdc > 0.0 {
                let p = if cfg.stop_gradient.mdc_p1 { g.detach(p1) } else { p1 };
                losses::loss_mdc(&mut g, &proj, p, ps1, ps2, yv)?
            } else {
                zero
            };
            let ei = if w.ei > 0.0 {
                let src = if cfg.ei_detach { g.detach(p1) } else { p1 };
                equivariance_loss(&mut g, &bound, &cfg.model, &proj, src, rotation, s.input_scale)?
            } else {
                zero
            };
            let dwt = if w.dwt > 0.0 {
                losses::loss_l1_transform(&mut g, &haar, out_all, b)?
            } else {
                zero
            };
            let tv = if w.tv > 0.0 {
                losses::loss_l1_transform(&mut g, &diff, out_all, b)?
            } else {
                zero
            };
            let lv = LossVars { mdc, mic, ei, dwt, tv };
            let total = lv.total(&mut g, &w)?;
            let comps = lv.values(&g);
            let total_value = g.scalar(total) as f64;
            check_finite(&comps, total_value, epoch, bi)?;
            s.step(&mut g, &vars, total)?;

            sums.mdc += comps.mdc;
            sums.mic += comps.mic;
            sums.ei += comps.ei;
            sums.dwt += comps.dwt;
            sums.tv += comps.tv;
            total_sum += total_value;
            n_batches += 1;
            s.stats.batches += 1;
        }
        s.finish_epoch(cfg, epoch, sums, total_sum, n_batches, started, out)?;
    }
    s.stats.ground_truth_reads = data.ground_truth_reads();
    s.into_outcome(cfg, out)
}

/// Supervised post-processing baseline: input `DAS(m y)`, label `DAS(y)`
/// from every channel, L1 loss. `supervised-masked` draws a fresh random
/// mask per batch; `supervised` uses `even_channels` fixed channels.
pub fn train_supervised(
    data: &TrainData,
    a: Arc<SystemMatrix>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    data.check_operator(&a)?;
    if cfg.mode == TrainMode::Cdss {
        return Err(TrainError::InvalidConfig("train_supervised needs a supervised mode".into()));
    }
    if data.is_empty() {
        return Err(TrainError::InvalidConfig("empty training set".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut s = Session::new(cfg, &a)?;
    let grid = *a.grid();
    let n_el = a.geometry().n_elements;
    let (n, npix) = (grid.nx, grid.len());
    let fixed = match (cfg.mode, cfg.even_channels) {
        (TrainMode::Supervised, Some(k)) => Some(even_channels(n_el, k)?),
        _ => None,
    };
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut total_sum = 0.0;
        let mut n_batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mask = match &fixed {
                Some(m) => m.clone(),
                None => ChannelMask::random(n_el, cfg.masking_ratio, &mut batch_stream(cfg.seed, 4, epoch, bi))?,
            };
            let mut x = Vec::with_capacity(b * npix);
            let mut label = Vec::with_capacity(b * npix);
            for &i in chunk {
                let y = data.measurement(i);
                x.extend(das_input(&a, &apply_mask(y, &mask)?, s.input_scale)?);
                label.extend(das_input(&a, y, s.input_scale)?);
            }
            let mut g = Graph::<f32>::new();
            let bound = s.params.bind(&mut g);
            let vars = bound.ordered(&s.params);
            let xv = g.input(Tensor::new(&[b, 1, n, n], x)?);
            let lv = g.input(Tensor::new(&[b, 1, n, n], label)?);
            let pred = ifunet::forward(&mut g, &bound, &cfg.model, xv)?;
            let d = g.sub(pred, lv)?;
            let l1 = g.l1(d);
            let loss = g.scale(l1, 1.0 / b as f32);
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    term: "l1",
                    epoch,
                    batch: bi,
                });
            }
            s.step(&mut g, &vars, loss)?;
            total_sum += value;
            n_batches += 1;
            s.stats.batches += 1;
        }
        s.finish_epoch(cfg, epoch, LossComponents::default(), total_sum, n_batches, started, out)?;
    }
    s.stats.ground_truth_reads = data.ground_truth_reads();
    s.into_outcome(cfg, out)
}

// ---- persistence -----------------------------------------------------------

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "L_mDC", "L_mIC", "L_EI", "L_DWT", "L_TV", "total", "wall_seconds"])?;
    for r in history {
        let c = &r.components;
        w.write_record([
            r.epoch.to_string(),
            c.mdc.to_string(),
            c.mic.to_string(),
            c.ei.to_string(),
            c.dwt.to_string(),
            c.tv.to_string(),
            r.total.to_string(),
            format!("{:.3}", r.wall_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: IFUnetConfig,
    input_scale: f64,
    epoch: usize,
    train: Option<TrainConfig>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &IFUnetParams<f32>,
    cfg: &TrainConfig,
    input_scale: f64,
    epoch: usize,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        input_scale,
        epoch,
        train: Some(cfg.clone()),
    };
    let named: Vec<(String, Tensor<f32>)> = params.names.iter().cloned().zip(params.tensors.iter().cloned()).collect();
    checkpoint::save(path, &named, &serde_json::to_value(meta)?)?;
    Ok(())
}

/// A trained network with everything needed to run it.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub params: IFUnetParams<f32>,
    pub config: IFUnetConfig,
    pub input_scale: f64,
    pub epoch: usize,
    pub train: Option<TrainConfig>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let (named, meta) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| TrainError::Checkpoint(format!("manifest metadata: {e}")))?;
    let (names, tensors) = named.into_iter().unzip();
    let params = IFUnetParams { names, tensors };
    params.check(&meta.model)?;
    Ok(LoadedModel {
        params,
        config: meta.model,
        input_scale: meta.input_scale,
        epoch: meta.epoch,
        train: meta.train,
    })
}
