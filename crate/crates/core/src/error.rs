use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix inversion failed at maximum jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("cavity collapse: cavity covariance has eigenvalue {min_eigenvalue:e}")]
    CavityCollapse { min_eigenvalue: f64 },

    #[error("symbol enumeration of {candidates} candidates exceeds the guard of {limit}")]
    EnumerationGuard { candidates: usize, limit: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
