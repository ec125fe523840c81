use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the estimation, simulation and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error in {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no feasible point found: {0}")]
    Infeasible(String),

    #[error("parameters outside admissible region: {0}")]
    InfeasibleParams(String),

    #[error("{stage} estimation failed: {source}")]
    Fit {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid initial state: {0}")]
    Init(String),

    #[error("rank deficient system: {0}")]
    Rank(String),

    #[error("simulation failed: {0}")]
    Sim(String),

    #[error("backtest undefined: {0}")]
    Test(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(expected: usize, found: usize) -> Self {
        Error::Dimension { expected, found }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Fit {
            stage,
            source: Box::new(self),
        }
    }

    /// `true` for errors caused by bad inputs rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Ingest { .. }
            | Error::Dimension { .. }
            | Error::InvalidInput(_)
            | Error::Io(_)
            | Error::Csv(_) => true,
            Error::Fit { source, .. } => source.is_input_error(),
            _ => false,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingest { .. } => "IngestError",
            Error::Dimension { .. } => "DimError",
            Error::Domain(_) => "DomainError",
            Error::InvalidInput(_) => "InputError",
            Error::Infeasible(_) => "InfeasibleError",
            Error::InfeasibleParams(_) => "InfeasibleParams",
            Error::Fit { .. } => "FitError",
            Error::Init(_) => "InitError",
            Error::Rank(_) => "RankError",
            Error::Sim(_) => "SimError",
            Error::Test(_) => "TestError",
            Error::Internal(_) => "InternalError",
            Error::Io(_) => "IoError",
            Error::Csv(_) => "IngestError",
        }
    }
}
