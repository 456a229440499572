//! Minimal reverse-mode differentiation over dense batches: MLP forward and
//! backward, a second-order pass for input-gradient penalties, Adam, and a
//! finite-difference checker used as the test oracle.

mod adam;
mod double;
mod fd;
mod fit;
mod mlp;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use double::ScalarInputGrad;
pub use fd::{finite_diff_check, FdReport};
pub use fit::{fit_mse, mse, FitConfig};
pub use mlp::{Activation, Mlp};
pub use tape::{Gradients, Tape, TapeOp};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("input has {got} columns, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid layer dimensions {0:?}")]
    InvalidArchitecture(Vec<usize>),
    #[error("seed shape {got:?} does not match tape output {expected:?}")]
    SeedShape { expected: (usize, usize), got: (usize, usize) },
    #[error("tape inconsistency: {0}")]
    TapeMismatch(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, NdError>;
