//! Disentangled routes and meta-weighted gradient fusion for multi-output
//! networks, with baseline trainers and gradient-conflict diagnostics.

pub mod bench;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod metagf;
pub mod model;
pub mod trainers;

pub use data::{Batch, Dataset, LabelMode};
pub use error::{Error, Result};
pub use model::{ImportanceInit, ImportanceSet, MultiOutputModel, ParamRef, Topology};
