use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("cannot normalize a field with zero norm")]
    ZeroField,

    #[error("propagation unstable at t = {time}: norm drift {drift:e} in one step")]
    Instability { time: f64, drift: f64 },

    #[error("no convergence after {iterations} iterations: {what}")]
    NonConvergence { what: String, iterations: usize },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("config line {line}: key `{key}`: {msg}")]
    Config { line: usize, key: String, msg: String },

    #[error("file format: {0}")]
    Format(String),

    #[error("observer failed: {0}")]
    Observer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Instability { .. }
                | Error::NonConvergence { .. }
                | Error::Sampling(_)
                | Error::Observer(_)
        )
    }
}
