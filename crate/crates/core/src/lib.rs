#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod autodiff;
pub mod codec;
pub mod consistency;
pub mod denoiser;
pub mod downstream;
pub mod error;
pub mod hint;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod toy;
pub mod transport;

pub use error::{Error, Result};
