use thiserror::Error;

/// Errors shared by every module of the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("degenerate teacher: {0}")]
    DegenerateTeacher(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
