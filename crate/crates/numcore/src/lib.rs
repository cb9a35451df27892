//! Numeric substrate: dense `f64` tensors, a reverse-mode autodiff graph,
//! a central-difference gradient oracle, filter-bank helpers, a portable
//! binary tensor container and a seeded RNG.

pub mod error;
pub mod filters;
pub mod finite_diff;
pub mod graph;
pub mod io;
pub mod rng;
pub mod tensor;

pub use error::{NumError, Result};
pub use filters::{filter_normalize, FilterDims};
pub use finite_diff::finite_diff;
pub use graph::{Gradients, Graph, NodeId, ParamId};
pub use rng::Rng;
pub use tensor::Tensor;
