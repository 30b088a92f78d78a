use thiserror::Error;

/// Failure of a CLI command, with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable, malformed or invalid configuration.
    #[error("invalid config: {0}")]
    Config(String),
    /// Not enough classes or samples for the requested protocol.
    #[error("capacity: {0}")]
    Capacity(String),
    /// A contract or invariant of the pipeline was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Capacity(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<fscil_core::Error> for CliError {
    fn from(e: fscil_core::Error) -> Self {
        use fscil_core::Error as E;
        match e {
            E::Capacity(m) => CliError::Capacity(m),
            E::Io(_) | E::Csv(_) | E::Json(_) | E::Format(_) => CliError::Io(e.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
