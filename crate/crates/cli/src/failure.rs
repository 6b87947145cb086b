use std::fmt;

use ddpc_core::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_WEIGHTS: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_REFERENCE: i32 = 4;
pub const EXIT_COUNT: i32 = 5;
pub const EXIT_TOO_FEW_POINTS: i32 = 6;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(EXIT_INPUT, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingReference => EXIT_REFERENCE,
            Error::Weights(_) => EXIT_WEIGHTS,
            Error::Io { .. }
            | Error::Ply { .. }
            | Error::EmptyFrame
            | Error::OutOfCube { .. }
            | Error::Truncated(_)
            | Error::Corrupt(_) => EXIT_INPUT,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Reads a file, mapping any failure to the malformed-input exit code.
pub fn read_input(path: &std::path::Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))
}

pub fn write_output(path: &std::path::Path, data: &[u8]) -> CliResult<()> {
    std::fs::write(path, data).map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display())))
}
