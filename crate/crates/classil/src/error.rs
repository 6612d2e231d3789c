use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad flags, config files or recipe names.
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents do not parse.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: classil_core::Error,
    },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        HarnessError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn core(context: impl Into<String>, source: classil_core::Error) -> Self {
        HarnessError::Core {
            context: context.into(),
            source,
        }
    }

    /// 1 for configuration problems, 2 for everything that failed at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }
}
