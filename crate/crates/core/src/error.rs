use thiserror::Error;

/// Errors raised by the tensor engine, the matching solvers and the
/// training loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op} at flat index {index}: input {value}")]
    Numeric {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible demand: {0}")]
    InfeasibleSpec(String),

    #[error("sinkhorn did not converge at eps={eps} after {iterations} iterations (row violation {violation:.3e})")]
    Convergence {
        eps: f64,
        iterations: usize,
        violation: f64,
    },

    #[error("exact oracle limited to rows+cols <= {limit}, got {rows}x{cols}")]
    OracleScale {
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite gradient for parameter {param} at index {index}")]
    NonFiniteGradient { param: usize, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}
