//! Small dense-tensor kernel with a reverse-mode tape: linear maps, ReLU,
//! single-head graph attention, segment mean pooling and the softmax
//! relaxations the actor needs.

mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use params::{Adam, ParamSet};
pub use tape::{argmax, Csr, GraphBatch, Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    Shape { op: &'static str, a: [usize; 2], b: [usize; 2] },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NotScalar([usize; 2]),
    #[error("loss does not depend on any parameter")]
    Detached,
    #[error("mean over an empty set")]
    EmptyMask,
    #[error("bad adjacency: {0}")]
    Adjacency(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
