//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is exactly what the physics-guided network needs: channel-wise
//! linear maps, causal temporal windows, fixed graph operators along the node
//! axis, gating nonlinearities, layer normalization and a fused weighted L1
//! loss. Matrix products go through `matrixmultiply`.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, WeightedL1};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
