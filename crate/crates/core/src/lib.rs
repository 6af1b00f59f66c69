//! Instrumented CNN training engine that treats convolution layers as
//! adaptive filters.

pub mod error;
pub mod gemm;
pub mod linalg;
pub mod tensor;
pub mod norm;
pub mod nlms;
pub mod data;
pub mod cnn;
pub mod modal;

pub use error::{Error, Result};
