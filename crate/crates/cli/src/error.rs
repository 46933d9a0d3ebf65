use std::fmt;

use progemb_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Internal,
}

/// A command failure, carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Internal,
            message: message.into(),
        }
    }

    pub fn prefixed(self, context: &str) -> Self {
        Self {
            kind: self.kind,
            message: format!("{context}: {}", self.message),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Io => 2,
            ErrorKind::Internal => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.kind {
            ErrorKind::Validation => "invalid input",
            ErrorKind::Io => "i/o error",
            ErrorKind::Internal => "internal error",
        };
        write!(f, "{label}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e.root() {
            Error::Io { .. } => ErrorKind::Io,
            Error::DimensionMismatch { .. }
            | Error::ZeroNorm(_)
            | Error::Shape(_)
            | Error::OutOfVocabulary { .. } => ErrorKind::Internal,
            Error::Empty(_)
            | Error::InvalidParameter { .. }
            | Error::DuplicateId(_)
            | Error::UnknownId(_)
            | Error::Format { .. }
            | Error::Generator { .. } => ErrorKind::Validation,
            Error::Context { .. } => unreachable!("root() strips context"),
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}
