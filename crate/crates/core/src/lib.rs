//! Bi-temporal change detection built on a frozen feature encoder.
//!
//! The network adapts a four-level feature pyramid with trainable
//! convolutional adaptors, fuses it top-down, learns a task-agnostic semantic
//! latent supervised only by temporal consistency on unchanged pixels, and
//! predicts changes through an attention gate driven by that latent.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod baseline;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
mod scalar;
pub mod semantic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub use data::{BiTemporalSample, ChangeLabel, LabelPolarity};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use model::{ChangeModel, EncoderSpec, FeaturePyramid, LevelSet, ModelConfig, SamCd};
pub use semantic::{ChangePrediction, SemanticLatent};
pub use training::{Checkpoint, TrainConfig, Trainer};

pub type SamCdF32 = SamCd<f32>;
pub type SamCdF64 = SamCd<f64>;
pub type PyramidF32 = FeaturePyramid<f32>;
pub type PyramidF64 = FeaturePyramid<f64>;
pub type PredictionF32 = ChangePrediction<f32>;
pub type TrainerF32 = Trainer<f32>;
pub type TrainerF64 = Trainer<f64>;
