//! Denoised non-local attention for semantic segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, kernels and a reverse-mode tape.
//! * [`attention`]: pairwise attention, global rectifying, local retention
//!   and residual aggregation.
//! * [`network`]: the segmentation model around the attention operator,
//!   the joint loss, checkpoints and analytic FLOP accounting.
//! * [`data`]: synthetic shape datasets, augmentation and their file format.
//! * [`training`]: SGD with momentum, poly schedule, mIoU, train/eval loops,
//!   finite-difference gradient checks.
//! * [`visualize`]: attention-map dumps.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod network;
pub mod tensor;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
