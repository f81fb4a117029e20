use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("region leaves the box: {0}")]
    OutOfBox(String),
    #[error("scale not resolvable on this grid: {0}")]
    Unresolvable(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("non-integrable curvature data: {0}")]
    NonIntegrable(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("malformed field data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
