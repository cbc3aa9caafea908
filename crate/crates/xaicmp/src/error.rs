//! Crate-wide error type.

use std::fmt;

/// Errors raised by any toolkit operation.
#[derive(Debug)]
pub enum Error {
    /// Tensor/grid dimension mismatch or malformed shape.
    Shape(String),
    /// API misuse, e.g. backward on a variable from a different tape.
    Usage(String),
    /// Invalid argument or configuration value.
    Validation(String),
    /// Malformed file contents (bad magic, truncation, range violations).
    Format(String),
    /// Underlying I/O failure, annotated with the path involved.
    Io(String, std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(path, err) => write!(f, "i/o error on {path}: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(_, err) => Some(err),
            _ => None,
        }
    }
}

impl Error {
    /// Process exit code mandated for this error class: 1 for anything the
    /// caller got wrong, 2 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_, _) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_validation_from_io() {
        assert_eq!(Error::Validation("x".into()).exit_code(), 1);
        assert_eq!(Error::Format("x".into()).exit_code(), 1);
        let io = Error::Io(
            "p".into(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        );
        assert_eq!(io.exit_code(), 2);
    }
}
