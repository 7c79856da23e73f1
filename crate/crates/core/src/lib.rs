//! Temporal-segment self-attention network for skeleton action recognition.

pub mod checkpoint;
pub mod consensus;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod model;
pub mod san;
pub mod skeleton;
pub mod train;

pub use error::{Error, Result};
