//! Error type shared by every solver in the crate.

use thiserror::Error;

use crate::continuation::SolveDiagnostics;

/// Failures reported by tree construction, coefficient validation and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed noise law or tree request.
    #[error("invalid topology: {0}")]
    Topology(String),

    /// Inputs whose dimensions or index ranges disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A call that is not meaningful for the given arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// Coefficient or problem data rejected at construction.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A non-finite value appeared while evaluating at a node.
    #[error("non-finite value at time {time}, node {node}: {what}")]
    NonFinite {
        time: usize,
        node: usize,
        what: String,
    },

    /// The stacked linear system could not be solved.
    #[error("linear system is numerically singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    /// The continuation ladder gave up; diagnostics describe every attempt.
    #[error("continuation did not converge: {reason}")]
    Convergence {
        reason: String,
        diagnostics: Box<SolveDiagnostics>,
    },

    /// A configured resource budget was exhausted.
    #[error("resource limit reached: {0}")]
    Resource(String),

    /// A self-check of generated data failed.
    #[error("internal consistency check failed: {0}")]
    Internal(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
