//! Dense-tensor computation substrate with reverse-mode differentiation.
//!
//! Everything downstream (encoder, losses) is built from the tape ops in
//! [`tape`], so a single finite-difference harness ([`fdcheck`]) can validate
//! the gradient of any loss end to end.

mod adam;
mod fdcheck;
mod store;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use fdcheck::{finite_difference_check, FdReport};
pub use store::ParamStore;
pub use tape::{softmax_lane, Gradients, Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by the differentiation substrate.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value encountered in `{op}` during {phase}")]
    NonFinite { op: &'static str, phase: &'static str },
    #[error("shape mismatch for parameter `{name}`: param {param:?} vs grad {grad:?}")]
    GradShape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
