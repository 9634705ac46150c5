//! Two-block models with hand-written gradients, AdamW, and the capacity sweep.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod train;

pub use model::{backward, fd_gradcheck, forward_loss, GradCheck, LossOutput, Model, ModelSpec, Params, Variant};
pub use optim::{lr_at, AdamW};
pub use sweep::{capacity_sweep, run_cell, SweepCell, SweepConfig, SweepRow};
pub use train::{evaluate, lr_grid, train, EpochStats, TrainConfig, TrainOutcome};
