use thiserror::Error;

/// Errors raised by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (empty reductions, bad ranges).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs that make an operation ill-defined, such as zero-norm rows or singleton batches.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Shape or argument mismatch between cooperating values.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The finite-difference oracle hit a non-finite function value.
    #[error("oracle error at coordinate {coordinate}: f evaluated to {value}")]
    Oracle { coordinate: usize, value: f64 },

    /// A loss or intermediate overflowed or produced NaN.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Bad configuration or usage.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training aborted on a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
