//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients are recorded as ordinary tape operations, so a gradient can feed
//! into a later loss and be differentiated again (double backward).

pub mod nn;
pub mod tape;
pub mod tensor;

pub use nn::{Adam, Ctx, LayerNorm, Linear, ParamId, Params, SelfAttention, TransformerLayer};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}
