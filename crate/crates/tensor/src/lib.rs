//! Minimal dense tensors with reverse-mode automatic differentiation,
//! sized for a small encoder-decoder Transformer.

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, WorstElement, FD_STEP, SCALE_FLOOR};
pub use graph::{AttentionLayout, CustomBackward, Graph, Var};
pub use scalar::Scalar;
pub use tensor::{check_finite, NormStats, Tensor};
pub mod suite;
