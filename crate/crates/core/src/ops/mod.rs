//! Raw forward/backward kernels on [`Tensor`](crate::Tensor) values. The
//! [`Tape`](crate::Tape) records these and calls the backward halves.

pub mod conv;
pub mod pointwise;
pub mod pool;
pub mod resample;

pub use conv::{conv2d, Conv2dSpec};
pub use pointwise::{activate, binary, concat_channels, dense, sigmoid, split_channels, Activation, BinaryKind};
pub use pool::{global_avg_pool, max_pool2};
pub use resample::{resize, upsample, UpsampleMode};
