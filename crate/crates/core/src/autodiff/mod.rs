//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Only the operations needed by the segmentation, auto-encoder and
//! discriminator networks and their losses are provided. Values live on a
//! [`Tape`]; every operation appends a node and [`Tape::backward`] sweeps the
//! nodes in reverse creation order.

mod conv;
mod gemm;
mod norm;
mod ops;
mod tape;
mod tensor;

pub use norm::{BnMode, BnState, BN_EPS, BN_MOMENTUM};
pub use ops::sigmoid;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
