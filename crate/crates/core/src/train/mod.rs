//! Optimizer, learning-rate schedule and the fold/cross-validation loops.

pub mod adam;
pub mod config;
pub mod harness;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use config::{lr_at_step, TrainConfig};
pub use harness::{
    cross_validate, predict_indices, sweep, train_fold, Aggregate, EpochRecord, FoldOutcome, FoldResult,
    MeanStd, RunSummary, StepRecord, SweepAxis, SweepRow,
};
