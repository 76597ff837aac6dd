//! Differentiable numeric substrate.

mod array;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use array::NumArray;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Unary, Var};
pub use layers::{
    attention, gru_step, mlp_forward, softmax_rows, Activation, GruParams, LayerNormParams, Linear,
    MlpParams,
};
pub use params::{ParamId, ParamStore};
