//! Probabilistic load forecasting on user graphs with memory-generated
//! kernels and streaming conformal calibration.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod graphs;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scqr;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::Tensor;
