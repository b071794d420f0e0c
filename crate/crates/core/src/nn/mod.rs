//! Minimal layers with explicit forward and backward passes.
//!
//! Feature maps are kept channels-last (`NHWC`) and flattened to a
//! `(batch·height·width, channels)` matrix so convolutions reduce to a single
//! GEMM over an im2col buffer.

mod activation;
mod adam;
mod conv;
mod dense;
mod params;

pub use activation::{elu, elu_backward, leaky_relu, leaky_relu_backward, tanh_backward, LEAKY_SLOPE};
pub use adam::{Adam, AdamConfig};
pub use conv::{global_avg_pool, global_avg_pool_backward, upsample2, upsample2_backward, Conv2d, Fmap};
pub use dense::Dense;
pub use params::{assign_tensors, collect_tensors, prefixed, Params};
