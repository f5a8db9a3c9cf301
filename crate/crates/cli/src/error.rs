use std::fmt;

use shiftlab_core::Error as CoreError;

/// Process exit status for each failure family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Data,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Numeric,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }

    /// Prefixes the message with where the failure happened.
    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            message: format!("{what}: {}", self.message),
            ..self
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match e {
            CoreError::Config(_) | CoreError::Contract(_) => ExitKind::Config,
            CoreError::Shape { .. } | CoreError::Data(_) => ExitKind::Data,
            CoreError::Degenerate(_) | CoreError::Singular(_) | CoreError::NonFinite(_) | CoreError::WarmUp { .. } => {
                ExitKind::Numeric
            }
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

pub(crate) fn io_err(what: impl fmt::Display, e: std::io::Error) -> CliError {
    CliError::data(format!("{what}: {e}"))
}
