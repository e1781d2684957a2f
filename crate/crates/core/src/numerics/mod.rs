//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod tape;
mod tensor;


use thiserror::Error;

pub use adam::{AdamConfig, AdamState, DecayMode};
pub use tape::{Gradients, NodeId, Tape, LOG_CLAMP};
pub use tensor::Tensor;

pub(crate) use tape::stacked_row_uncertainty;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("calibration strength must be finite and non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node is not on this tape")]
    ForeignNode,
}

/// `a · b` on plain values.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(a, b)?;
    Ok(tape.value(out).clone())
}

/// Stable softmax of plain values along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let out = tape.softmax(x, axis)?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let (x, g, b) = (tape.constant(x.clone()), tape.constant(gain.clone()), tape.constant(bias.clone()));
    let out = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(out).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| if *v < 0.0 { 0.0 } else { *v }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn dropout(x: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let node = tape.constant(x.clone());
    let out = tape.dropout(node, rate, training, seed)?;
    Ok(tape.value(out).clone())
}

/// Mean cross-entropy of probability rows against 0-based class ids.
pub fn cross_entropy(probs: &Tensor, targets: &[usize]) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let out = tape.cross_entropy(p, targets)?;
    Ok(tape.value(out).item())
}
