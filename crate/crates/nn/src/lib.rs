//! Small reverse-mode autodiff engine over `ndarray` matrices, with the
//! operations needed by a pre-norm causal transformer and an AdamW optimizer.

mod optim;
mod params;
mod tape;

pub use optim::{AdamW, AdamWConfig, AdamWState, StepStats};
pub use params::{NamedTensor, ParamId, ParamStore};
pub use tape::{masked_softmax, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),
    #[error("no allowed entry in mask row {0}")]
    EmptyMask(usize),
    #[error("target {target} is masked in row {row}")]
    MaskedTarget { row: usize, target: usize },
}
