//! Minimal differentiable core: a matrix tape, parameter storage, the
//! transformer layer set and a finite-difference gradient checker.

mod config;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use config::{DenoiseOrder, ModelConfig};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{
    encoding_matrix, positional_encoding, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    TransformerBlock,
};
pub use params::{Gradients, Param, ParamId, ParamStore};
