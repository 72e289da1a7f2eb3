//! Compressible multi-task features.
//!
//! Building blocks for training a split (edge/cloud) multi-task network whose
//! bottleneck features are cheap to transmit:
//!
//! - [`rateloss`]: differentiable compressibility loss (DPCM + DCT + ℓ1).
//! - [`quantizer`]: uniform n-bit Q-layer and its additive-noise training proxy.
//! - [`featcodec`]: channel tiling, a lossless DPCM + arithmetic-coded container,
//!   and an external image-codec hook.
//! - [`mtl`]: task losses, the uncertainty-weighted total loss, a toy
//!   encoder/three-decoder model and its training loop.
//! - [`eval`]: entropy, PSNR, mIoU, IRMSE and Bjontegaard-delta rate.
//! - [`experiment`]: benchmark vs. proposed runs over a codec sweep.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod featcodec;
pub mod mtl;
pub mod quantizer;
pub mod rateloss;
pub mod tensor;

pub use error::{Error, Result};
pub use featcodec::{Bitstream, TiledImage};
pub use quantizer::{LevelTensor, QuantParams};
pub use tensor::{FeatureTensor, Matrix, Tensor};
