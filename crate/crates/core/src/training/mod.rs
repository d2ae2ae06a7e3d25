//! Loss functions, optimizer, learning-rate schedule and the epoch loop.

pub mod config;
pub mod loss;
pub mod optimizer;
pub mod trainer;

pub use config::{lr_at_epoch, TrainConfig};
pub use loss::{loss_and_gradients, total_loss, weighted_cross_entropy, LossBreakdown};
pub use optimizer::{sgd_step, OptimizerState};
pub use trainer::{
    load_model, train, train_patches, EpochRecord, TrainLog, TrainOptions, TrainOutcome,
};
