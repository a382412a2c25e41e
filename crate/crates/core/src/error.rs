use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `sin(lambda0)` vanishes, so the Helmholtz operator is not invertible.
    #[error("resonant problem: sin({lambda0}) = {sine:e}, operator is not invertible")]
    Resonance { lambda0: f64, sine: f64 },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    /// Cholesky factorization failed even after the largest jitter was added.
    #[error("ill-conditioned matrix: Cholesky failed with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("non-finite activations in layer {layer}")]
    NumericOverflow { layer: String },

    #[error("model configuration error: {0}")]
    Configuration(String),

    #[error("training diverged at iteration {iteration}: loss {loss:e} exceeds 1e6 x initial loss {initial:e}")]
    Divergence {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
