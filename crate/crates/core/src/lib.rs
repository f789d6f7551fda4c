//! SimMTM-style masked time-series pre-training at desk scale.
//!
//! The crate is organized around a small dense-tensor engine with
//! reverse-mode differentiation (`numerics`), on top of which the
//! masking, encoding, similarity aggregation, loss, and training
//! machinery is built.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod similarity;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use numerics::graph::{Graph, VarId};
pub use numerics::tensor::Tensor;
