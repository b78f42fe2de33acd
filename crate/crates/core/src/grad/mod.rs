//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive application of one forward pass; a
//! single [`Tape::backward`] then walks it in reverse. Element type is generic
//! so the same graph can run in `f32` for training and `f64` for gradient
//! verification.

mod check;
pub mod kernels;
mod loss;
mod ops;
mod optim;
pub mod suite;
mod tape;
mod tensor;

pub use check::{central_difference, finite_diff_check, relative_error, FdReport};
pub use loss::{bce_with_logits, smooth_l1, softmax_ce, LossValue};
pub use ops::{sigmoid, CropWindow, Primitive};
pub use optim::{sgd_momentum_step, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("loss must be a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    Consumed,
}
