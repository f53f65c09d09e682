use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("restriction is infeasible: {0}")]
    InfeasibleRestriction(String),
    #[error("ill-posed problem: {0}")]
    IllPosed(String),
    #[error("instance is infeasible: {0}")]
    InfeasibleInstance(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("sampler diverged at step {step} (t = {t}, beta = {beta}): {detail}")]
    Divergence {
        step: usize,
        t: usize,
        beta: f64,
        detail: String,
    },
    #[error("non-finite training loss at step {step} (learning rate {lr})")]
    NonFiniteLoss { step: usize, lr: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed artifact {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::State(_) | Error::Config(_) => ErrorClass::Config,
            Error::File { .. } | Error::Format { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => {
                ErrorClass::Io
            }
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Numerical,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidArgument(format!(
            "{what} has dimension {got}, expected {want}"
        )));
    }
    Ok(())
}
