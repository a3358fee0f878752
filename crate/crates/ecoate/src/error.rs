//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`crate::Result`]. Variants
//! are grouped roughly by subsystem: expression handling, numerical routines,
//! model fitting, the federation protocol, and I/O.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ---- expression language ----
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("unknown variable `{name}` (covariate dimension is {dim})")]
    UnknownVariable { name: String, dim: usize },

    #[error("domain error evaluating `{context}`: {message}")]
    Domain { context: String, message: String },

    // ---- numerics ----
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("insufficient data in {context}: need at least {required} rows, have {available}")]
    InsufficientData {
        context: String,
        required: usize,
        available: usize,
    },

    #[error("empty stratum: no training points with arm {arm}")]
    EmptyStratum { arm: u8 },

    #[error("quasi-complete separation in logistic fit (|coefficient| exceeded {bound})")]
    Separation { bound: f64 },

    #[error(
        "root solve did not converge after {iterations} iterations \
         (best residual sup-norm {residual:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("singular matrix in {0} (pseudoinverse fallback also degenerate)")]
    Singular(String),

    // ---- data / model fitting ----
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("treatment arm {arm} has no observations on site {site}")]
    EmptyArm { site: u32, arm: u8 },

    #[error("covariate shift fit failed for site {site}: {message}")]
    ShiftFit { site: u32, message: String },

    #[error("tilt coefficient solve failed for site {site}: {message}")]
    BetaSolve { site: u32, message: String },

    // ---- federation protocol ----
    #[error("schema version mismatch: expected {expected}, message carries {actual}")]
    SchemaVersion { expected: String, actual: String },

    #[error("malformed message from site {site}: {message}")]
    Message { site: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("timed out after {seconds}s waiting for {what}")]
    Timeout { seconds: u64, what: String },

    // ---- configuration / I/O ----
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
