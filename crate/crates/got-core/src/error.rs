use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem with a graph (bad index, unknown node, ...).
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    /// A graph point lies outside its edge interval.
    #[error("invalid graph point: edge {edge} coord {coord} outside [0, {len}]")]
    InvalidPoint { edge: usize, coord: f64, len: f64 },

    /// Input violates an operation's domain (mixed atom kinds, bad weights,
    /// CFL violation, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// No finite-cost transport plan exists.
    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    /// Grid spacing too coarse for the requested tube geometry.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// An iterative solver exhausted its budget; the message carries the
    /// last residuals so the caller can diagnose.
    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    /// File format violation (wrong version tag, missing field, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
