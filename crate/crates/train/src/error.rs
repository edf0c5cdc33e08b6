use pact_autodiff::AutodiffError;
use pact_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("degenerate mask: {n} channels with masking ratio {ratio} leaves one side empty")]
    DegenerateMask { n: usize, ratio: f64 },
    #[error("{channels} attention channels cannot be split into {heads} heads")]
    IndivisibleHeads { channels: usize, heads: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("non-finite loss term {term} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { term: &'static str, epoch: usize, batch: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
