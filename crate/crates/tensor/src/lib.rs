//! Minimal dense `f64` tensor engine: a recording tape with reverse-mode
//! differentiation, the handful of kernels a small attention network needs,
//! and the Adam optimizer.

mod adam;
mod error;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::TensorError;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{GroupReduce, Tape, Var};
pub use tensor::Tensor;
