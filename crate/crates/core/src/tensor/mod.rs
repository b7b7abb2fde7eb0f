//! Dense arrays with a reverse-mode gradient tape.
//!
//! A [`Graph`] records every op eagerly and supports one reverse sweep from a
//! scalar. Reductions run in a fixed index order so identical inputs give
//! bit-identical outputs across runs.

mod array;
mod checkpoint;
mod conv;
mod gradcheck;
mod graph;

pub use array::{Real, Tensor};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use conv::{conv_output_len, ConvGeometry, Padding};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("nonfinite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}")]
    InvalidArgument(String),
}
