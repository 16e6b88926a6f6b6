//! Self-supervised language-prior debiasing for visual question answering,
//! built on a small reverse-mode differentiation engine.
//!
//! The pieces, bottom-up:
//!
//! - [`autodiff`]: tensors, the computation graph and gradient checking.
//! - [`data`]: synthetic worlds whose train and test answer priors differ.
//! - [`model`]: question encoder, object attention, fusion and classifier.
//! - [`losses`]: answering losses, answer confidence and the
//!   question-dependency regularizer.
//! - [`sampler`]: balanced relevant/irrelevant question-image pairs.
//! - [`trainer`]: Adam, the step schedule, pretraining and fine-tuning.
//! - [`eval`]: accuracy breakdowns and the prior-confidence probe.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

pub use data::{Dataset, Instance, WorldSpec};
pub use eval::{ComparisonRecord, MetricsReport};
pub use losses::{Head, LossConfig};
pub use model::{ModelSpec, Params};
pub use sampler::PairMode;
pub use trainer::{TrainConfig, TrainHistory};
