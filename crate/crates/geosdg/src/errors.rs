//! Command-level errors with a fixed exit-code partition:
//! 2 = configuration, 3 = ingest/format/IO, 4 = numerical,
//! 5 = degenerate fit.

use std::path::Path;

use geosdg_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error("config error: {0}")]
    Config(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Ingest(_) | CmdError::Format { .. } | CmdError::Io { .. } => 3,
            CmdError::Numerical(_) => 4,
            CmdError::DegenerateFit(_) => 5,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CmdError::Config(msg.into())
    }

    pub fn ingest(msg: impl Into<String>) -> Self {
        CmdError::Ingest(msg.into())
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        CmdError::Format {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CmdError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CmdError::Config(m),
            CoreError::Shape(m) | CoreError::InvalidValue(m) => CmdError::Config(m),
            CoreError::Numerical { site, detail } => {
                CmdError::Numerical(format!("{site}: {detail}"))
            }
            CoreError::DegenerateFit(m) => CmdError::DegenerateFit(m),
        }
    }
}

pub type CmdResult<T> = Result<T, CmdError>;
