//! The `pact` command line.
//!
//! Every command reads an optional JSON [`RunConfig`], applies flag
//! overrides, writes its artifacts into `--out` together with
//! `resolved_config.json` and `pact.log`, and returns an exit code: 0 on
//! success, 1 on usage errors, 2 when a library operation fails.

mod config;
mod error;
mod export;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pact_core::acoustic::{das_with_operator, iterative_reconstruct};
use pact_core::metrics::compute_metrics;
use pact_core::phantom::{generate_dataset, Dataset, Split};
use pact_core::{ImageField, SystemMatrix};
use pact_train::eval::{eval_mask, evaluate_model, format_summary, summarize, write_rows, EvalConfig, Reference};
use pact_train::train::{reconstruct, LoadedModel};
use pact_train::{apply_mask, load_checkpoint, train_cdss, train_supervised, TrainData, TrainMode};
use serde::Serialize;

pub use config::RunConfig;
pub use error::{CliError, Result};
use error::OpContext;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const LOG_FILE: &str = "pact.log";

#[derive(Debug, Parser)]
#[command(name = "pact", version, about = "Sparse-view photoacoustic reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if needed).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed used by this command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Masking {
    /// Fraction of channels dropped.
    #[arg(long, conflicts_with = "keep_fraction")]
    masking_ratio: Option<f64>,
    /// Fraction of channels kept (`1 - masking ratio`).
    #[arg(long)]
    keep_fraction: Option<f64>,
}

impl Masking {
    /// Requested masking ratio, if any.
    fn ratio(&self) -> Result<Option<f64>> {
        let r = match (self.masking_ratio, self.keep_fraction) {
            (Some(r), _) => Some(r),
            (_, Some(k)) => Some(1.0 - k),
            _ => None,
        };
        if let Some(r) = r {
            if !(0.0..1.0).contains(&r) {
                return Err(CliError::Usage(format!(
                    "--masking-ratio/--keep-fraction: masking ratio {r} outside [0, 1)"
                )));
            }
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum ReconMethod {
    Das,
    Tv,
    Wavelet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReferenceArg {
    Phantom,
    DenseDas,
}

impl From<ReferenceArg> for Reference {
    fn from(r: ReferenceArg) -> Self {
        match r {
            ReferenceArg::Phantom => Reference::Phantom,
            ReferenceArg::DenseDas => Reference::DenseDas,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the sparse system matrix for the configured ring and grid.
    BuildOperator {
        #[command(flatten)]
        common: Common,
        /// Weight taps by inverse propagation distance.
        #[arg(long)]
        amplitude_decay: bool,
    },
    /// Generate train and test phantom datasets (seed: dataset seed).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        operator: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Signal-to-noise ratio in dB; `inf` for noise-free data.
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        amplitude_decay: bool,
    },
    /// Reconstruct one slice with a classical method (seed: mask seed).
    Recon {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "das")]
        method: ReconMethod,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        slice: usize,
        /// Use the noise-free sinogram.
        #[arg(long)]
        clean: bool,
        #[arg(long)]
        operator: Option<PathBuf>,
        #[command(flatten)]
        masking: Masking,
    },
    /// Self-supervised training from noisy sinograms (seed: training seed).
    TrainCdss {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Supervised baseline against full-channel delay-and-sum labels.
    TrainSupervised {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Fixed evenly spaced input channels instead of random masks.
        #[arg(long)]
        even_channels: Option<usize>,
    },
    /// Keep-fraction sweep with SSIM, PSNR and RMSE (seed: evaluation seed).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        operator: Option<PathBuf>,
        /// Comma-separated fractions of channels kept, e.g. 0.1,0.2,0.5.
        #[arg(long, value_delimiter = ',')]
        keep_fractions: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        reference: Option<ReferenceArg>,
    },
    /// Write reconstructions and difference maps as 16-bit PGM images
    /// (seed: mask seed).
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        slice: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        operator: Option<PathBuf>,
        /// Classical methods to include.
        #[arg(long, value_enum, value_delimiter = ',', default_value = "das")]
        method: Vec<ReconMethod>,
        #[arg(long, value_enum, default_value = "phantom")]
        reference: ReferenceArg,
        #[command(flatten)]
        masking: Masking,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset; defaults to `paths.train_dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    operator: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    masking: Masking,
}

/// Per-command log written next to the artifacts.
struct RunLog {
    file: File,
}

impl RunLog {
    fn create(dir: &Path) -> Result<Self> {
        Ok(Self {
            file: File::create(dir.join(LOG_FILE))?,
        })
    }

    fn line(&mut self, msg: impl AsRef<str>) -> Result<()> {
        writeln!(self.file, "{}", msg.as_ref())?;
        log::info!("{}", msg.as_ref());
        Ok(())
    }
}

/// Worker threads requested through `PACT_THREADS`. Every computation runs
/// serially, so the value is validated and recorded but does not change the
/// results.
fn requested_threads() -> Result<Option<usize>> {
    match std::env::var("PACT_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("PACT_THREADS={v:?} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pact: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    log: RunLog,
}

impl Context {
    fn open(common: &Common, args: &[OsString], apply: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<Self> {
        let threads = requested_threads()?;
        let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
        apply(&mut cfg)?;
        fs::create_dir_all(&common.out)?;
        let mut log = RunLog::create(&common.out)?;
        let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        log.line(format!("command: {}", argv.join(" ")))?;
        log.line(match threads {
            Some(n) => format!("PACT_THREADS={n}; running serially"),
            None => "running serially".to_string(),
        })?;
        cfg.write(&common.out.join(RESOLVED_CONFIG))?;
        Ok(Self {
            cfg,
            out: common.out.clone(),
            log,
        })
    }

    fn operator(&mut self, path: Option<&Path>) -> Result<Arc<SystemMatrix>> {
        let path = path.map(Path::to_path_buf).or_else(|| self.cfg.paths.operator.clone());
        let a = match path {
            Some(p) => {
                self.log.line(format!("loading operator {}", p.display()))?;
                let a = SystemMatrix::load(&p).op("SystemMatrix::load")?;
                if *a.geometry() != self.cfg.geometry || *a.grid() != self.cfg.grid {
                    self.log.line("operator geometry overrides the configured geometry")?;
                    self.cfg.geometry = *a.geometry();
                    self.cfg.grid = *a.grid();
                    self.cfg.write(&self.out.join(RESOLVED_CONFIG))?;
                }
                a
            }
            None => SystemMatrix::build_with(&self.cfg.geometry, &self.cfg.grid, self.cfg.operator.amplitude_decay)
                .op("SystemMatrix::build")?,
        };
        Ok(Arc::new(a))
    }

    fn operator_for(&mut self, path: Option<&Path>, d: &Dataset) -> Result<Arc<SystemMatrix>> {
        if path.is_none() && self.cfg.paths.operator.is_none() {
            self.cfg.geometry = d.geometry;
            self.cfg.grid = d.grid;
            self.cfg.write(&self.out.join(RESOLVED_CONFIG))?;
        }
        self.operator(path)
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).op("Dataset::load")
}

fn require(path: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("{flag} is required (or set it under paths in --config)")))
}

fn classical(cfg: &RunConfig, a: &SystemMatrix, y: &pact_core::Sinogram, method: ReconMethod) -> Result<ImageField> {
    match method {
        ReconMethod::Das => das_with_operator(a, y).op("das_reconstruct"),
        ReconMethod::Tv => Ok(iterative_reconstruct(a, y, &cfg.recon.tv).op("iterative_reconstruct")?.image),
        ReconMethod::Wavelet => Ok(iterative_reconstruct(a, y, &cfg.recon.wavelet).op("iterative_reconstruct")?.image),
    }
}

#[derive(Serialize)]
struct ImageRecord<'a> {
    method: &'a str,
    slice: usize,
    channels_kept: usize,
    nx: usize,
    ny: usize,
    pitch_m: f64,
    values: &'a [f64],
}

fn model_label(m: &LoadedModel) -> &'static str {
    match m.train.as_ref().map(|t| t.mode) {
        Some(TrainMode::Supervised) => "supervised",
        Some(TrainMode::SupervisedMasked) => "supervised-masked",
        _ => "cdss",
    }
}

fn execute(command: Command, args: &[OsString]) -> Result<()> {
    match command {
        Command::BuildOperator { common, amplitude_decay } => {
            let mut ctx = Context::open(&common, args, |c| {
                c.operator.amplitude_decay |= amplitude_decay;
                Ok(())
            })?;
            let a = SystemMatrix::build_with(&ctx.cfg.geometry, &ctx.cfg.grid, ctx.cfg.operator.amplitude_decay)
                .op("SystemMatrix::build")?;
            let path = ctx.out.join("operator.pactop");
            a.save(&path).op("SystemMatrix::save")?;
            ctx.log.line(format!(
                "operator {} x {} with {} nonzeros -> {}",
                a.rows(),
                a.cols(),
                a.nnz(),
                path.display()
            ))?;
        }
        Command::Simulate {
            common,
            operator,
            n_train,
            n_test,
            snr_db,
            amplitude_decay,
        } => {
            let mut ctx = Context::open(&common, args, |c| {
                c.operator.amplitude_decay |= amplitude_decay;
                if let Some(n) = n_train {
                    c.dataset.n_train = n;
                }
                if let Some(n) = n_test {
                    c.dataset.n_test = n;
                }
                if let Some(s) = snr_db {
                    if s.is_nan() {
                        return Err(CliError::Usage("--snr-db must be a number or inf".into()));
                    }
                    c.noise.snr_db = s.is_finite().then_some(s);
                }
                if let Some(s) = common.seed {
                    c.dataset.seed = s;
                }
                Ok(())
            })?;
            let a = ctx.operator(operator.as_deref())?;
            let d = ctx.cfg.dataset.clone();
            for (split, n, name) in [(Split::Train, d.n_train, "train.pactds"), (Split::Test, d.n_test, "test.pactds")] {
                let ds = generate_dataset(&a, &ctx.cfg.phantom, n, ctx.cfg.noise.snr(), d.seed, split)
                    .op("generate_dataset")?;
                let path = ctx.out.join(name);
                ds.save(&path).op("Dataset::save")?;
                ctx.log.line(format!(
                    "{n} {split:?} slices, realized SNR {:.2} dB -> {}",
                    ds.realized_snr_db(),
                    path.display()
                ))?;
            }
        }
        Command::Recon {
            common,
            method,
            dataset,
            slice,
            clean,
            operator,
            masking,
        } => {
            let ratio = masking.ratio()?;
            let mut ctx = Context::open(&common, args, |_| Ok(()))?;
            let ds = load_dataset(&dataset)?;
            let entry = ds
                .entries
                .get(slice)
                .ok_or_else(|| CliError::Usage(format!("--slice {slice}: dataset has {} slices", ds.len())))?;
            let a = ctx.operator_for(operator.as_deref(), &ds)?;
            let y = if clean { &entry.clean } else { &entry.noisy };
            let n = a.geometry().n_elements;
            let mask = eval_mask(n, 1.0 - ratio.unwrap_or(0.0), common.seed.unwrap_or(0), 0, slice)
                .map_err(|e| CliError::Usage(format!("--keep-fraction: {e}")))?;
            let y = apply_mask(y, &mask).op("apply_mask")?;
            let p = classical(&ctx.cfg, &a, &y, method)?;
            let name = format!("{method:?}").to_lowercase();
            let record = ImageRecord {
                method: &name,
                slice,
                channels_kept: mask.kept(),
                nx: p.grid.nx,
                ny: p.grid.ny,
                pitch_m: p.grid.pitch_m,
                values: &p.values,
            };
            fs::write(ctx.out.join("recon.json"), serde_json::to_string(&record)?)?;
            export::write_image(&ctx.out.join("recon.pgm"), &p)?;
            let m = compute_metrics(&p, &entry.phantom, true).op("compute_metrics")?;
            ctx.log.line(format!(
                "{name} slice {slice} with {} channels: ssim {:.4} psnr {:.2} dB rmse {:.4}",
                mask.kept(),
                m.ssim,
                m.psnr_db,
                m.rmse
            ))?;
        }
        Command::TrainCdss { common, train } => run_training(&common, args, train, TrainMode::Cdss, None)?,
        Command::TrainSupervised {
            common,
            train,
            even_channels,
        } => {
            let mode = if even_channels.is_some() {
                TrainMode::Supervised
            } else {
                TrainMode::SupervisedMasked
            };
            run_training(&common, args, train, mode, even_channels)?
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            operator,
            keep_fractions,
            reference,
        } => {
            if let Some(k) = keep_fractions.as_ref().and_then(|v| v.iter().find(|k| !(**k > 0.0 && **k <= 1.0))) {
                return Err(CliError::Usage(format!("--keep-fractions: {k} outside (0, 1]")));
            }
            let mut ctx = Context::open(&common, args, |c| {
                if let Some(k) = keep_fractions {
                    c.masking.keep_fractions = k;
                }
                if let Some(r) = reference {
                    c.masking.reference = r.into();
                }
                if let Some(s) = common.seed {
                    c.masking.eval_seed = s;
                }
                if checkpoint.is_some() {
                    c.paths.checkpoint = checkpoint.clone();
                }
                if dataset.is_some() {
                    c.paths.test_dataset = dataset.clone();
                }
                Ok(())
            })?;
            let ds = load_dataset(&require(None, &ctx.cfg.paths.test_dataset, "--dataset")?)?;
            let a = ctx.operator_for(operator.as_deref(), &ds)?;
            let model = match &ctx.cfg.paths.checkpoint {
                Some(p) => Some(load_checkpoint(p).op("load_checkpoint")?),
                None => None,
            };
            let ec = EvalConfig {
                keep_fractions: ctx.cfg.masking.keep_fractions.clone(),
                seed: ctx.cfg.masking.eval_seed,
                reference: ctx.cfg.masking.reference,
                model_label: model.as_ref().map_or("cdss", model_label).to_string(),
            };
            let rows = evaluate_model(model.as_ref(), &a, &ds, &ec).op("evaluate_model")?;
            write_rows(&ctx.out.join("metrics.csv"), &rows).op("write metrics")?;
            let summary = format_summary(&summarize(&rows));
            fs::write(ctx.out.join("summary.csv"), &summary)?;
            ctx.log.line(format!("{} metric rows", rows.len()))?;
            for l in summary.lines() {
                ctx.log.line(l)?;
            }
            print!("{summary}");
        }
        Command::Export {
            common,
            dataset,
            slice,
            checkpoint,
            operator,
            method,
            reference,
            masking,
        } => {
            let ratio = masking.ratio()?;
            let mut ctx = Context::open(&common, args, |c| {
                if checkpoint.is_some() {
                    c.paths.checkpoint = checkpoint.clone();
                }
                Ok(())
            })?;
            let ds = load_dataset(&dataset)?;
            let entry = ds
                .entries
                .get(slice)
                .ok_or_else(|| CliError::Usage(format!("--slice {slice}: dataset has {} slices", ds.len())))?;
            let a = ctx.operator_for(operator.as_deref(), &ds)?;
            let n = a.geometry().n_elements;
            let mask = eval_mask(n, 1.0 - ratio.unwrap_or(0.0), common.seed.unwrap_or(0), 0, slice)
                .map_err(|e| CliError::Usage(format!("--keep-fraction: {e}")))?;
            let y = apply_mask(&entry.noisy, &mask).op("apply_mask")?;
            let reference_img = match reference {
                ReferenceArg::Phantom => entry.phantom.clone(),
                ReferenceArg::DenseDas => das_with_operator(&a, &entry.noisy).op("das_reconstruct")?,
            };
            export::write_image(&ctx.out.join("reference.pgm"), &reference_img)?;
            let mut images: Vec<(String, ImageField)> = Vec::new();
            for m in &method {
                images.push((format!("{m:?}").to_lowercase(), classical(&ctx.cfg, &a, &y, *m)?));
            }
            if let Some(p) = &ctx.cfg.paths.checkpoint {
                let model = load_checkpoint(p).op("load_checkpoint")?;
                let img = reconstruct(&model.params, &model.config, &a, &y, model.input_scale).op("reconstruct")?;
                images.push((model_label(&model).to_string(), img));
            }
            for (name, img) in &images {
                export::write_image(&ctx.out.join(format!("{name}.pgm")), img)?;
                export::write_difference(&ctx.out.join(format!("{name}_diff.pgm")), img, &reference_img)?;
                let m = compute_metrics(img, &reference_img, true).op("compute_metrics")?;
                ctx.log.line(format!(
                    "{name}: {} channels, ssim {:.4} psnr {:.2} dB rmse {:.4}",
                    mask.kept(),
                    m.ssim,
                    m.psnr_db,
                    m.rmse
                ))?;
            }
        }
    }
    Ok(())
}

fn run_training(
    common: &Common,
    args: &[OsString],
    train: TrainArgs,
    mode: TrainMode,
    even_channels: Option<usize>,
) -> Result<()> {
    let ratio = train.masking.ratio()?;
    let mut ctx = Context::open(common, args, |c| {
        if let Some(r) = ratio {
            c.masking.masking_ratio = r;
        }
        if let Some(e) = train.epochs {
            c.training.epochs = e;
        }
        if let Some(s) = common.seed {
            c.training.seed = s;
        }
        if even_channels.is_some() {
            c.training.even_channels = even_channels;
        }
        if train.dataset.is_some() {
            c.paths.train_dataset = train.dataset.clone();
        }
        Ok(())
    })?;
    let tc = ctx.cfg.train_config(mode);
    tc.validate().map_err(|e| CliError::Usage(format!("training configuration: {e}")))?;
    let ds = load_dataset(&require(None, &ctx.cfg.paths.train_dataset, "--dataset")?)?;
    let a = ctx.operator_for(train.operator.as_deref(), &ds)?;
    ctx.log.line(format!(
        "{mode:?} training on {} slices for {} epochs, batch {}, masking ratio {}",
        ds.len(),
        tc.epochs,
        tc.batch_size,
        tc.masking_ratio
    ))?;
    let data = TrainData::new(&ds);
    let out = match mode {
        TrainMode::Cdss => train_cdss(&data, a, &tc, Some(&ctx.out)).op("train_cdss")?,
        _ => train_supervised(&data, a, &tc, Some(&ctx.out)).op("train_supervised")?,
    };
    for r in &out.history {
        ctx.log.line(format!("epoch {} total {}", r.epoch, r.total))?;
    }
    ctx.log.line(format!(
        "{} batches, input scale {}, ground-truth reads {}",
        out.stats.batches, out.input_scale, out.stats.ground_truth_reads
    ))?;
    Ok(())
}
