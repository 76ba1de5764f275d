use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown reference: {0}")]
    Reference(String),

    #[error("invalid logical form: {0}")]
    Validation(String),

    #[error("execution failed: {0}")]
    Execution(String),

    #[error("work budget of {0} operations exhausted")]
    Timeout(u64),

    #[error("pointer substitution failed: {0}")]
    Substitution(String),

    #[error("no linking candidate for mention {0:?}")]
    LinkFailure(String),

    #[error("data error ({context}): {message}")]
    Data { context: String, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("decoding failed: {0}")]
    DecodeFailure(String),

    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn data(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            context: context.into(),
            message: message.into(),
        }
    }
}
