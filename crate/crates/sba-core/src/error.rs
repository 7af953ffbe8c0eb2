use thiserror::Error;

/// Errors shared across the training library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Operand shapes do not conform; both shapes are reported.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A value is outside the domain an operation accepts.
    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },

    /// A caller broke an API contract (wrong tape, non-scalar loss, k not in S, ...).
    #[error("contract violation in {op}: {message}")]
    Contract { op: &'static str, message: String },

    /// Invalid run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file; the byte offset or line is named where known.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    /// A loss became NaN/Inf mid-run; the run is aborted with its context.
    #[error(
        "non-finite loss at iteration {iteration} (epoch {epoch}): \
         eta={eta}, sigma={sigma}, tau={tau}"
    )]
    NonFiniteLoss {
        iteration: u64,
        epoch: usize,
        eta: f64,
        sigma: f64,
        tau: f64,
    },

    /// Underlying I/O failure with the path involved.
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
