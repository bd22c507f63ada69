//! Dense double-precision tensors and a tape-based reverse-mode
//! differentiation engine, sized for small recurrent policy networks.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse
//! and returns [`Gradients`] for every node that depends on a parameter
//! leaf. Parameters live outside the graph in a [`ParamStore`]; they are
//! copied into a graph with [`ParamStore::bind`] and updated through an
//! [`Optimizer`].

mod checkpoint;
mod error;
mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_HEADER};
pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use params::ParamStore;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
