use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("internal-wave mode index {j} outside 1..={j_max}")]
    ModeIndex { j: usize, j_max: usize },

    #[error("requested {requested} modes but only {available} are trapped at k = {k} rad/km")]
    TooFewTrappedModes {
        requested: usize,
        available: usize,
        k: f64,
    },

    #[error("grid mismatch: expected {expected} samples, found {found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("unitarity defect {defect:.3e} exceeds tolerance {tol:.1e}")]
    UnitarityDefect { defect: f64, tol: f64 },

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("wavenumber window clips the source spectrum: edge weight {edge_weight:.3e} of peak exceeds {limit:.3e}")]
    KWindowClipped { edge_weight: f64, limit: f64 },

    #[error("grid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}
