use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] modcomp::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("diverged at step {step} (loss {loss}); artifacts written to {dir}")]
    Diverged { step: usize, loss: f64, dir: PathBuf },
    #[error("{0}")]
    Report(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Exit codes: 2 config, 3 divergence, 4 infeasible split, 5 degenerate
/// teacher, 6 io, 1 anything else.
impl CliError {
    pub fn exit_code(&self) -> i32 {
        use modcomp::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::InvalidArgument(_) | E::Parse(_) | E::NotFound(_) | E::InvalidLayout(_)) => 2,
            CliError::Diverged { .. } | CliError::Core(E::Diverged { .. }) => 3,
            CliError::Core(E::InfeasibleSplit(_)) => 4,
            CliError::Core(E::DegenerateTeacher(_)) => 5,
            CliError::Io { .. } | CliError::Core(E::Io(_)) => 6,
            _ => 1,
        }
    }
}

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
