use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid hyper-parameters: {0}")]
    Hyper(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("operator is not invertible (zero-order weight must be positive)")]
    NotInvertible,

    #[error("solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("cannot orthonormalise {k} latent rows with only {n} images")]
    Rank { k: usize, n: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("worker error: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
