//! Crate-wide error type and the process exit codes derived from it.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
///
/// Variants are grouped by how the failure should be reported at the process
/// boundary; see [`Error::exit_code`].
#[derive(Error, Debug)]
pub enum Error {
    /// Operands with incompatible dimensions reached a tensor or model op.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value left the numeric domain an operation requires (zero where a
    /// reciprocal is taken, NaN/Inf in a result, and similar).
    #[error("numeric domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Invalid configuration or command-line usage.
    #[error("usage: {0}")]
    Usage(String),

    /// Dataset could not be read, parsed, or prepared.
    #[error("ingestion: {0}")]
    Ingestion(String),

    /// A peer violated the wire protocol (bad frame, wrong round, duplicate
    /// update, version mismatch, lost connection, oversized payload...).
    #[error("protocol: {0}")]
    Protocol(String),

    /// A peer did not act within the configured deadline.
    #[error("timeout: {0}")]
    Timeout(String),

    /// An invariant check ran to completion and found a violation.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 verification failure, 2 ingestion,
    /// 3 protocol, 4 timeout, 5 usage. I/O failures count as ingestion since
    /// they concern reading inputs or writing run artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 1,
            Error::Ingestion(_) | Error::Io(_) => 2,
            Error::Shape { .. } | Error::Domain { .. } | Error::Protocol(_) => 3,
            Error::Timeout(_) => 4,
            Error::Usage(_) => 5,
        }
    }

    /// Shorthand for a [`Error::Shape`] with a formatted detail string.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Shorthand for a [`Error::Domain`] with a formatted detail string.
    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_cli_contract() {
        assert_eq!(Error::Verification("x".into()).exit_code(), 1);
        assert_eq!(Error::Ingestion("x".into()).exit_code(), 2);
        assert_eq!(Error::Protocol("x".into()).exit_code(), 3);
        assert_eq!(Error::Timeout("x".into()).exit_code(), 4);
        assert_eq!(Error::Usage("x".into()).exit_code(), 5);
        assert_eq!(Error::shape("op", "d").exit_code(), 3);
        assert_eq!(Error::domain("op", "d").exit_code(), 3);
    }

    #[test]
    fn display_includes_context() {
        let e = Error::shape("hadamard", "2x3 vs 3x2");
        assert_eq!(e.to_string(), "shape mismatch in hadamard: 2x3 vs 3x2");
    }
}
