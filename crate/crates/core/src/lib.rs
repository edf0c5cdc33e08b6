//! Photoacoustic computed tomography on a ring transducer array.
//!
//! - [`acoustic`]: geometry, the sparse time-of-flight system matrix, its
//!   adjoint, delay-and-sum and iterative model-based reconstruction.
//! - [`phantom`]: synthetic initial-pressure phantoms, noisy measurements and
//!   the dataset container.
//! - [`image_ops`]: rotations, orthonormal Haar wavelets and total variation.
//! - [`metrics`]: SSIM, PSNR and RMSE.

pub mod acoustic;
mod error;
pub mod image_ops;
pub mod metrics;
pub mod phantom;
pub mod rng;

pub use acoustic::{ImageField, ImageGrid, RingGeometry, Sinogram, SystemMatrix};
pub use error::{CoreError, Result};
