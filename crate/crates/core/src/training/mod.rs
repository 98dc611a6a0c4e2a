//! Optimization loop, schedule, augmentation, label subsampling,
//! checkpoints and test-time augmentation.

mod augment;
mod checkpoint;
mod config;
mod optim;
mod schedule;
mod subsample;
mod trainer;
mod tta;

pub use augment::{apply_augment, augment, draw_augment, AugmentDraw};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use optim::Sgd;
pub use schedule::poly_lr;
pub use subsample::subsample_labels;
pub use trainer::{evaluate, predict_sample, stream_rng, train, EpochRecord, LogRecord, StepRecord, TrainOutcome, Trainer};
pub use tta::{tta_predict, tta_probability, tta_probability_with, transforms_for, Transform};
