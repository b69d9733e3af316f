use syq_core::SyqError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{flag}: {message}")]
    Usage { flag: String, message: String },

    #[error(transparent)]
    Core(#[from] SyqError),
}

impl CliError {
    pub fn usage(flag: &str, message: impl Into<String>) -> Self {
        CliError::Usage {
            flag: flag.to_string(),
            message: message.into(),
        }
    }

    /// Configuration problems reported by the core library become usage errors.
    pub fn from_config(err: SyqError) -> Self {
        match err {
            SyqError::Config { field, message } => CliError::Usage { flag: field, message },
            SyqError::InvalidArgument(message) | SyqError::Contract(message) => CliError::Usage {
                flag: "config".into(),
                message,
            },
            other => CliError::Core(other),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage { .. } => EXIT_USAGE,
            CliError::Core(e) => match e {
                SyqError::Config { .. } | SyqError::UnsupportedGranularity { .. } => EXIT_USAGE,
                SyqError::Format { .. } | SyqError::Io { .. } => EXIT_DATA,
                SyqError::Divergence { .. } => EXIT_DIVERGED,
                _ => EXIT_INTERNAL,
            },
        }
    }
}
