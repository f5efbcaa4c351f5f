use std::io;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum CflError {
    /// Shapes, key sets, or index lists that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A graph or operation the autograd engine cannot differentiate.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid call argument (empty inputs, bad numeric ranges).
    #[error("argument error: {0}")]
    Argument(String),

    /// Latency table has no entry for a requested key.
    #[error("latency table has no entry for {0}")]
    Coverage(String),

    /// No architecture satisfies the latency bound.
    #[error("no feasible architecture under bound {bound_ms} ms (tightest latency found {tightest_ms} ms)")]
    Infeasible { bound_ms: f64, tightest_ms: f64 },

    /// Not enough samples to build the requested data partition.
    #[error("partition error: {0}")]
    Partition(String),

    /// Malformed file contents.
    #[error("parse error: {0}")]
    Parse(String),

    /// Report inputs that cannot be combined.
    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CflError>;

macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::CflError::Structural(format!($($arg)*)) };
}
pub(crate) use structural;
