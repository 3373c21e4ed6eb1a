use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Error)]
pub enum DgpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive semi-definite (last jitter attempted: {jitter:e})")]
    NotPsd { jitter: f64 },

    #[error("non-finite value in layer {layer}: {detail}")]
    NonFinite { layer: usize, detail: String },

    #[error("non-finite objective when probing coordinate {coordinate} ({name})")]
    NonFiniteGradient { coordinate: usize, name: String },

    #[error("optimisation diverged at iteration {iteration} (ELBO {elbo:e})")]
    Diverged {
        iteration: usize,
        elbo: f64,
        trace: Vec<(usize, f64)>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {source_name} at line {line}, column {column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DgpError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DgpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DgpError::NotPsd { .. }
                | DgpError::NonFinite { .. }
                | DgpError::NonFiniteGradient { .. }
                | DgpError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DgpError>;
