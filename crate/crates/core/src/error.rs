use thiserror::Error;

use crate::model::C2CModel;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss; carries the parameters from the
    /// last step that completed cleanly.
    #[error("numerical error: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        last_good: Box<C2CModel>,
    },

    #[error("split construction failed at stage `{stage}`: {reason}")]
    ConstructionFailed { stage: &'static str, reason: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::Numerical(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
