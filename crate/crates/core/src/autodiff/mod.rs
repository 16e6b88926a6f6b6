//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_TOLERANCE};
pub use graph::{BatchNormMode, GradientMap, Graph, NodeId, Op, OpKind, BATCH_NORM_EPS};
pub use params::ParamSet;
pub use tensor::Tensor;
