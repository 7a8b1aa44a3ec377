//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or batch dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Requested decomposition rank outside `1..=min(rows, cols)`.
    #[error("rank {rank} out of range for {rows}x{cols} matrix")]
    Rank { rank: usize, rows: usize, cols: usize },

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Invalid configuration or degenerate inputs.
    #[error("config error: {0}")]
    Config(String),

    /// Operation applied to an object in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// Malformed checkpoint or export file.
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    /// Training aborted because the loss left the finite range.
    #[error("divergence at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn state(detail: impl Into<String>) -> Self {
        Error::State(detail.into())
    }

    pub fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { field: field.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
