//! Run configuration: one JSON document, every field defaulted.

use std::fs;
use std::path::{Path, PathBuf};

use pact_core::acoustic::IterativeConfig;
use pact_core::phantom::PhantomSpec;
use pact_core::{ImageGrid, RingGeometry};
use pact_train::eval::Reference;
use pact_train::train::{RotationMode, StopGradient};
use pact_train::{IFUnetConfig, LossWeights, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: RingGeometry,
    pub grid: ImageGrid,
    pub operator: OperatorSection,
    pub phantom: PhantomSpec,
    pub noise: NoiseSection,
    pub dataset: DatasetSection,
    pub masking: MaskingSection,
    pub model: IFUnetConfig,
    pub training: TrainingSection,
    pub losses: LossWeights,
    pub recon: ReconSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: RingGeometry::desk(),
            grid: ImageGrid::desk(),
            operator: OperatorSection::default(),
            phantom: PhantomSpec::default(),
            noise: NoiseSection::default(),
            dataset: DatasetSection::default(),
            masking: MaskingSection::default(),
            model: IFUnetConfig::tiny(),
            training: TrainingSection::default(),
            losses: LossWeights::default(),
            recon: ReconSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    /// Weight taps by inverse distance.
    pub amplitude_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// `null` simulates noise-free data.
    pub snr_db: Option<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { snr_db: Some(40.0) }
    }
}

impl NoiseSection {
    pub fn snr(&self) -> f64 {
        self.snr_db.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingSection {
    /// Fraction of channels dropped by the training mask.
    pub masking_ratio: f64,
    pub keep_fractions: Vec<f64>,
    pub eval_seed: u64,
    pub reference: Reference,
}

impl Default for MaskingSection {
    fn default() -> Self {
        Self {
            masking_ratio: 0.5,
            keep_fractions: vec![0.5, 0.4, 0.3, 0.2, 0.1],
            eval_seed: 0,
            reference: Reference::Phantom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rotation: RotationMode,
    pub wavelet_levels: usize,
    pub checkpoint_every: usize,
    pub stop_gradient: StopGradient,
    pub ei_detach: bool,
    pub even_channels: Option<usize>,
    pub input_scale: Option<f64>,
    pub record_wall_time: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            seed: t.seed,
            rotation: t.rotation,
            wavelet_levels: t.wavelet_levels,
            checkpoint_every: 10,
            stop_gradient: t.stop_gradient,
            ei_detach: t.ei_detach,
            even_channels: t.even_channels,
            input_scale: t.input_scale,
            record_wall_time: t.record_wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSection {
    pub tv: IterativeConfig,
    pub wavelet: IterativeConfig,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self {
            tv: IterativeConfig::tv(),
            wavelet: IterativeConfig::wavelet(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Prebuilt operator; rebuilt from geometry and grid when absent.
    pub operator: Option<PathBuf>,
    pub train_dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            mode,
            masking_ratio: self.masking.masking_ratio,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            seed: t.seed,
            rotation: t.rotation,
            weights: self.losses,
            wavelet_levels: t.wavelet_levels,
            checkpoint_every: t.checkpoint_every,
            model: self.model.clone(),
            stop_gradient: t.stop_gradient,
            ei_detach: t.ei_detach,
            even_channels: t.even_channels,
            input_scale: t.input_scale,
            record_wall_time: t.record_wall_time,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let round: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"training": {"epoch": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"geometry": {"elements": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"training": {"epochs": 3}, "noise": {"snr_db": null}}"#).unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.batch_size, TrainingSection::default().batch_size);
        assert!(c.noise.snr().is_infinite());
    }
}
