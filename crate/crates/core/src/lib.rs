// `!(x > 0.0)` is the intended way to reject NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod annotation;
pub mod augment;
pub mod error;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod patching;
pub mod pipeline;
pub mod synth;
