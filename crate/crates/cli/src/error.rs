use thiserror::Error;

/// Process exit status for a successful command.
pub const EXIT_OK: i32 = 0;
/// Exit status for invalid input: manifests, configs, malformed data.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for failures while doing the work: I/O, image codecs.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<streetgaze_core::Error> for CliError {
    fn from(e: streetgaze_core::Error) -> Self {
        use streetgaze_core::Error as E;
        match e {
            E::Io(_) | E::Image { .. } => CliError::Runtime(e.into()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<streetgaze_service::ServiceError> for CliError {
    fn from(e: streetgaze_service::ServiceError) -> Self {
        use streetgaze_service::ServiceError as E;
        match e {
            E::Storage(_) | E::Corrupt(_) | E::Crashed => CliError::Runtime(e.into()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
