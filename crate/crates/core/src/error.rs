use thiserror::Error;

/// Errors raised by the geometry, orbit, index and reporting layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point outside chart domain: {0}")]
    Domain(String),

    #[error("accuracy bound violated: {what} = {value:e} exceeds {bound:e}")]
    Accuracy { what: String, value: f64, bound: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("frame error: {0}")]
    Frame(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate quadratic form: eigenvalue {value:e} within tolerance {tol:e}")]
    DegenerateForm { value: f64, tol: f64 },

    #[error("irregular crossing at {at}: {detail}")]
    Irregular { at: f64, detail: String },

    #[error("path is not admissible: {0}")]
    Admissibility(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn accuracy(what: impl Into<String>, value: f64, bound: f64) -> Self {
        Error::Accuracy {
            what: what.into(),
            value,
            bound,
        }
    }

    /// True for errors that signal a non-generic (degenerate) input rather than a bug.
    pub fn is_degeneracy(&self) -> bool {
        matches!(self, Error::Degenerate(_))
    }
}
