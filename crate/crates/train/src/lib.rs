//! Self-supervised sparse-view reconstruction training.
//!
//! - [`ifunet`]: the Unet with Inceptionformer skip blocks.
//! - [`masks`]: complementary channel masks.
//! - [`losses`]: the mDC, mIC, EI, wavelet and TV terms.
//! - [`train`]: CDSS and supervised loops, history and checkpoints.
//! - [`eval`]: keep-fraction sweeps and metric tables.

mod error;
pub mod eval;
pub mod ifunet;
pub mod losses;
pub mod masks;
pub mod operators;
pub mod train;

pub use error::{Result, TrainError};
pub use ifunet::{IFUnetConfig, IFUnetParams, PoolKind};
pub use losses::{LossComponents, LossWeights};
pub use masks::{apply_mask, even_channels, sample_masks, ChannelMask};
pub use train::{
    load_checkpoint, train_cdss, train_supervised, LoadedModel, RotationMode, TrainConfig, TrainData, TrainMode,
    TrainOutcome,
};
