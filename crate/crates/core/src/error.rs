use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid does not fit inside the ring: half diagonal {half_diagonal_m} m >= radius {radius_m} m")]
    GridOutsideRing { half_diagonal_m: f64, radius_m: f64 },
    #[error("time window too short: pixel {pixel} of element {element} needs sample {sample:.3}, window holds {n_samples}")]
    TimeWindowTooShort {
        element: usize,
        pixel: usize,
        sample: f64,
        n_samples: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every channel of the sinogram is zero")]
    AllChannelsMasked,
    #[error("objective became non-finite at iteration {0}; step too large for the operator norm")]
    Divergence(usize),
    #[error("angle {0} rad is not a multiple of pi/2")]
    AngleNotExact(f64),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("cannot place shapes: {0}")]
    UnplaceableShape(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("unsupported file version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("reference image is identically zero")]
    ZeroReference,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
