//! Dense tensors, counter-based random streams and reverse-mode gradients.

mod graph;
mod rng;
mod tensor;

pub use graph::{gelu, layer_norm_rows, softmax_rows, Expand, Graph, Var, LAYER_NORM_EPS, LOG_PROB_FLOOR};
pub use rng::{gaussian, label_hash, RngStream};
pub use tensor::Tensor;
