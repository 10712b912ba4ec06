use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing {}: run `trofi {command}` first", path.display())]
    Dependency { path: PathBuf, command: &'static str },

    #[error("server error: {0}")]
    Server(String),

    #[error(transparent)]
    Core(#[from] trofi_core::error::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// Process exit status: 2 usage, 3 missing dependency, 4 numeric
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use trofi_core::error::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Server(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::Unlabeled(_) => 3,
                E::Divergence(_) | E::Numeric(_) | E::DegenerateCorrelation(_) => 4,
                _ => 1,
            },
        }
    }
}
