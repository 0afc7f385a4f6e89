//! Reverse-mode automatic differentiation over dense arrays.
//!
//! Forward ops execute eagerly on a [`Tape`]; [`Tape::backward`] walks the
//! record in reverse. All kernels have fixed accumulation order, so outputs
//! and gradients are bit-identical across runs and thread counts.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape, MASK_NEG};
pub use tensor::{c, Scalar, Tensor};
