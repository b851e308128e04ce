//! Error taxonomy shared by the whole crate.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by who
//! is at fault: [`Error::Config`] and [`Error::Usage`] indicate a problem the
//! caller can fix (bad hyperparameters, misused API), while the remaining
//! variants report bad data, exhausted guards, numeric failure, or I/O.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All error conditions surfaced by this crate.
#[derive(Debug)]
pub enum Error {
    /// Invalid or inconsistent configuration: shape mismatches at
    /// construction, out-of-range hyperparameters, unknown config keys.
    Config(String),
    /// Structurally valid call with invalid runtime data: a label outside
    /// the class range, an empty batch, mismatched operand shapes.
    InvalidInput(String),
    /// API misuse: calling `backward` on a tensor with no recorded tape,
    /// stepping an optimizer whose parameters have no gradients.
    Usage(String),
    /// A resource guard tripped: an enumeration or allocation would exceed
    /// the documented bounds.
    Resource(String),
    /// Corrupt or truncated serialized content: dataset records, checkpoint
    /// bytes, digest mismatches.
    Data(String),
    /// Numeric failure during training or inference, e.g. a non-finite loss.
    Numeric(String),
    /// An underlying I/O failure, annotated with what was being done.
    Io {
        /// What the crate was doing when the failure occurred.
        context: String,
        /// The originating I/O error.
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an I/O error with a human-readable context string.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// True when the error indicates caller-side misuse (bad configuration
    /// or bad invocation) rather than a data, numeric, or system failure.
    /// The CLI maps these to a distinct exit code.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Usage(msg) => write!(f, "usage: {msg}"),
            Error::Resource(msg) => write!(f, "resource limit: {msg}"),
            Error::Data(msg) => write!(f, "data: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric: {msg}"),
            Error::Io { context, source } => write!(f, "io: {context}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_is_one_line_and_prefixed_by_kind() {
        let cases: Vec<(Error, &str)> = vec![
            (Error::Config("dims must be >= 1".into()), "config: dims must be >= 1"),
            (Error::InvalidInput("label 12 out of range".into()), "invalid input: label 12 out of range"),
            (Error::Usage("backward on a leaf".into()), "usage: backward on a leaf"),
            (Error::Resource("too many units".into()), "resource limit: too many units"),
            (Error::Data("truncated record".into()), "data: truncated record"),
            (Error::Numeric("loss is not finite".into()), "numeric: loss is not finite"),
        ];
        for (err, expect) in cases {
            let shown = err.to_string();
            assert_eq!(shown, expect);
            assert!(!shown.contains('\n'));
        }
    }

    #[test]
    fn io_errors_carry_context_and_source() {
        let inner = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let err = Error::io("reading batch file", inner);
        let shown = err.to_string();
        assert!(shown.starts_with("io: reading batch file:"));
        assert!(std::error::Error::source(&err).is_some());
    }

    #[test]
    fn usage_classification_drives_exit_codes() {
        assert!(Error::Config("x".into()).is_usage());
        assert!(Error::Usage("x".into()).is_usage());
        assert!(!Error::Data("x".into()).is_usage());
        assert!(!Error::io("x", std::io::Error::other("y")).is_usage());
    }
}
