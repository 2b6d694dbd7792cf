//! Reverse-mode differentiation over dense tensors, the layer vocabulary of
//! the aging and generator networks, and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use params::{uniform_fan_in, Bound, ParamSet};
pub use tape::{Gradients, Tape, Var, INSTANCE_NORM_EPS};
pub use tensor::{Element, Tensor};

/// Default negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to the current recording (tape already consumed?)")]
    StaleVar,
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
