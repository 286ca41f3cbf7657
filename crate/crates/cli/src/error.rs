use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] fedst_core::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config, 3 protocol, 4 data, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use fedst_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Dimension(_) => 2,
                E::Protocol(_) => 3,
                E::Data(_) | E::Io(_) => 4,
                E::Contract(_) | E::NonFinite(_) => 1,
            },
        }
    }
}
