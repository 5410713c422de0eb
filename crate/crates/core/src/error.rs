use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },

    #[error("invalid uncertainty set: {0}")]
    InvalidSet(String),

    /// The budget closed forms assume the truncated corners are disjoint.
    #[error("closed form not valid for budget set: gamma = {gamma} < rho / 2 = {}", rho / 2.0)]
    FormulaInvalid { rho: f64, gamma: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rank-deficient system: Gram condition estimate {condition:.3e}")]
    RankDeficient { condition: f64 },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
