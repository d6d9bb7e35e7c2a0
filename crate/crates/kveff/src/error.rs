use std::path::PathBuf;

/// CLI failure, each variant mapped to a stable process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A check requested on the command line did not hold (exit 1).
    #[error("check failed: {0}")]
    Check(String),
    /// Bad configuration or arguments (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// Reading or writing a file failed (exit 3).
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<kveff_core::Error> for CliError {
    fn from(e: kveff_core::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
