//! Dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is 64-bit, row-major, and deterministic: operations run in a
//! fixed order with no parallel reductions, so a run is bit-reproducible
//! for a given seed.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_multi};
pub use graph::{Graph, VarId};
pub use tensor::Tensor;
