use std::fmt;
use std::process::ExitCode;

use egostan::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// A check ran and failed; exit code 1.
    Check(String),
    Core(Error),
    Io(String, std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        let usage = match self {
            CliError::Usage(_) => true,
            CliError::Core(e) => matches!(
                e,
                Error::Config(_) | Error::Shape { .. } | Error::UnknownAction { .. } | Error::InvalidArgument(_)
            ),
            CliError::Check(_) | CliError::Io(..) => false,
        };
        ExitCode::from(if usage { 2 } else { 1 })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(path, e) => write!(f, "{path}: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub fn create_dir(path: &std::path::Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(path.display().to_string(), e))
}
