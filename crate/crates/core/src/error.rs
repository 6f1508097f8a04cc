use std::path::PathBuf;

use thiserror::Error;

use crate::ingest::ContainerError;
use crate::tensor::KernelError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{arch} needs at least {min} timepoints, got {got}")]
    TooShort { arch: &'static str, min: usize, got: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("trial {index}: {source}")]
    Trial {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("matrix dimension mismatch: {expected} vs {got}")]
    Dim { expected: usize, got: usize },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("stream protocol violation: {0}")]
    Protocol(String),
    #[error("replay window is empty after warm-up (trial {0})")]
    EmptyWindow(usize),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("benchmark stage {0} produced non-finite output")]
    NonFiniteBench(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_trial(self, index: usize) -> Self {
        Error::Trial {
            index,
            source: Box::new(self),
        }
    }
}
