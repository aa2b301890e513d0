use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed content: {detail}", path.display())]
    Parse { path: PathBuf, detail: String },
    #[error("numerical failure: {0}")]
    Numerical(#[from] bgdeconv::Error),
}

impl CliError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, detail: impl ToString) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
