//! A compact, deterministic, single-threaded autograd engine for 1-D
//! signal models: convolution, pooling, normalization, recurrent and
//! attention layers, plus Adam.
//!
//! Every step builds a fresh [`Graph`] over an immutable [`ParamStore`];
//! [`Graph::backward`] yields [`Gradients`] that an optimizer applies once
//! the graph is dropped.

pub mod error;
pub mod gemm;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{BatchNorm1d, Conv1d, LayerNorm, Linear, Lstm};
pub use optim::{apply_buffer_updates, Adam, AdamConfig};
pub use params::{Checkpoint, NamedTensor, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
