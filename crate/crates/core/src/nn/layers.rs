use super::tape::{NodeId, Tape};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Rows of an embedding table selected by `indices`.
pub fn embed_lookup(tape: &mut Tape<'_>, table: NodeId, indices: &[usize]) -> Result<NodeId> {
    tape.gather(table, indices.to_vec())
}

/// `act(x W + b)`.
pub fn dense_forward(
    tape: &mut Tape<'_>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    let y = tape.add_bias(xw, b)?;
    Ok(match activation {
        Activation::Relu => tape.relu(y),
        Activation::None => y,
    })
}

/// Softmax over experts for each row of gate logits.
pub fn softmax_gate(tape: &mut Tape<'_>, logits: NodeId) -> NodeId {
    tape.softmax(logits)
}
