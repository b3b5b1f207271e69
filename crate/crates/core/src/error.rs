use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity showed up where finite numbers are required.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// A rollout produced a non-finite state.
    #[error("rollout diverged: non-finite state at step {step}")]
    Diverged { step: usize },

    /// A value violates a domain invariant (bad mass, bad index, ...).
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    /// Binary trajectory or checkpoint payload could not be decoded.
    #[error("malformed {field} in {path}: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite { what: what.into() }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
