//! Multi-task click / conversion training with a pairwise conversion-ranking loss.

pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
