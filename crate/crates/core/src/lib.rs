//! Deterministic simulator for customized federated learning over an elastic,
//! layer-gated parent model.
//!
//! Each round the server picks a latency-bounded submodel per worker, workers
//! train their slice locally, and the server scatters the structurally
//! different updates back to parent shape before a data-size weighted sum.

pub mod align;
pub mod bench;
pub mod error;
pub mod fl;
pub mod nn;
pub mod report;
pub mod search;
pub mod supernet;

pub use error::{CflError, Result};

/// Number of data quality levels, from sharpened (0) to heavily blurred (4).
pub const QUALITY_LEVELS: usize = 5;
