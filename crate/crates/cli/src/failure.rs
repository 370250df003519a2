use std::fmt;
use std::process::ExitCode;

use lfod_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_CHECKPOINT: u8 = 5;

/// Error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Validation { .. }
            | Error::Structure(_)
            | Error::Format { .. }
            | Error::Metric(_)
            | Error::Io { .. } => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

/// Output-side IO problems count as data errors.
pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}
