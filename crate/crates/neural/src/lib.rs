//! Minimal numeric core: row-major tensors, a reverse-mode tape, the layers
//! needed by a GRU encoder-decoder and a transformer, softmax cross-entropy,
//! Adam, and finite-difference gradient checking.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod params;
pub mod real;
pub mod tensor;

pub use adam::AdamState;
pub use error::{NeuralError, Result};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{attention_mask, Embedding, FeedForward, GruCell, LayerNorm, Linear, MultiHeadAttention};
pub use loss::softmax_cross_entropy;
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
