//! CPU tensor ops with hand-written gradients, the Adam optimizer, and
//! bit-exact parameter checkpoints.
//!
//! Feature maps are `Array4` in (batch, channels, height, width) layout. Ops
//! are generic over the float type: training runs in `f32`, while the
//! finite-difference harness in [`gradcheck`] drives the same code in `f64`.
//! Every gradient here is verified against central finite differences.

pub mod gradcheck;
pub mod ops;
pub mod params;

pub use ops::*;
pub use params::{AdamConfig, ModelParams};

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use thiserror::Error;

/// Scalar type usable in all kernels; implemented by `f32` and `f64`.
pub trait Scalar: NdFloat + FromPrimitive {}
impl<T: NdFloat + FromPrimitive> Scalar for T {}

/// Feature map in (batch, channels, height, width) layout, training precision.
pub type FeatureMap = ndarray::Array4<f32>;

/// Errors from kernel ops, the optimizer, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, msg: impl Into<String>) -> KernelError {
    KernelError::ShapeMismatch { op, msg: msg.into() }
}
