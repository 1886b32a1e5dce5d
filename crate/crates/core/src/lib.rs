//! Privacy-aware sparse mixture-of-experts classification with
//! bandwidth-constrained token offloading over a simulated wireless uplink.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod scheduler;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Optimizer, ParamId, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;
