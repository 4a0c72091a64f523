use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AbpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AbpError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("Langevin chain diverged{}", .example.map(|i| format!(" for training example {i}")).unwrap_or_default())]
    ChainDiverged { example: Option<usize> },

    #[error("forward trace does not belong to these parameters (trace revision {trace}, params revision {params})")]
    StaleTrace { trace: u64, params: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}{}: {message}", .path.display(), .offset.map(|o| format!(" at offset {o}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        offset: Option<u64>,
        message: String,
    },

    #[error("{}: declared {declared} but found {found}", .path.display())]
    FileShape {
        path: PathBuf,
        declared: String,
        found: String,
    },

    #[error("{}: line {line}: label {label} out of range (num_classes = {num_classes})", .path.display())]
    LabelOutOfRange {
        path: PathBuf,
        line: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("{}: byte offset {offset}: mask value {value} is not 0 or 1", .path.display())]
    NonBinaryMask { path: PathBuf, offset: u64, value: u8 },
}

impl AbpError {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        AbpError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AbpError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: Option<u64>, message: impl Into<String>) -> Self {
        AbpError::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    /// True for failures of the input files rather than of the numerics.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            AbpError::Io { .. }
                | AbpError::Format { .. }
                | AbpError::FileShape { .. }
                | AbpError::LabelOutOfRange { .. }
                | AbpError::NonBinaryMask { .. }
        )
    }
}
