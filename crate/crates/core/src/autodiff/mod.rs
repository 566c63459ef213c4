//! Minimal differentiation engine.
//!
//! Spatial derivatives of network outputs are carried forward as per-sample
//! Jacobian blocks ([`DualBatch`]); parameter gradients come from a reverse
//! sweep over a [`Tape`] that records the Jacobian arithmetic too, so a loss
//! may consume spatial derivatives and still be differentiated exactly.

mod dual;
mod params;
mod tape;

pub use dual::{forward_with_jacobian, DualBatch, Layer, TANGENTS};
pub use params::{Gradients, ParamId, ParamSlot, ParamStore};
pub use tape::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
}
