//! Dense tensor math with reverse-mode gradients.

pub mod checkpoint;
mod layers;
mod optim;
mod params;
mod tape;

pub use layers::{dense_forward, embed_lookup, softmax_gate, Activation};
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, NodeId, Tape};

/// Head probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;
