//! Multi-task model, losses, training and coded-feature evaluation.
//!
//! A toy encoder produces one bottleneck tensor that feeds three decoders:
//! semantic segmentation (cross-entropy), disparity (MSE) and input
//! reconstruction (MAE). Training combines the task losses and, optionally,
//! the compressibility loss with trainable uncertainty weights.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use config::{Config, QuantRange};
pub use data::{make_dataset, SyntheticSample, IMAGE_SIZE, NUM_CLASSES};
pub use evaluate::{evaluate, CodecSetting, EvalReport, SettingResult};
pub use loss::{loss_disp, loss_recon, loss_seg, total_loss, total_loss_grad, total_loss_var, TaskWeights};
pub use model::{Checkpoint, Head, ModelArch, ToyModel};
pub use train::{format_log, initial_model, test_set, train, train_set, EpochLog, TrainOutcome};
