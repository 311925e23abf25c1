//! Scatter-dataflow convolution kernels and rotation-invariant group
//! convolution for CPUs.

pub mod backward;
pub mod bench;
pub mod error;
pub mod group;
pub mod reference;
pub mod scatter;
pub mod steerable;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
