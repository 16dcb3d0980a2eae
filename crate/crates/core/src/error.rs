use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix {name} is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {diff:e}")]
    NotSymmetric {
        name: String,
        row: usize,
        col: usize,
        diff: f64,
    },

    #[error("matrix {name} is not positive definite (smallest eigenvalue {min_eig:e})")]
    NotPositiveDefinite { name: String, min_eig: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("operation requires a {expected} feeder")]
    WrongLayout { expected: &'static str },

    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("training step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::IllConditioned(_) | Error::NoConvergence(_) => true,
            Error::Training { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
