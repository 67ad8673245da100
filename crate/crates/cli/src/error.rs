use std::io;
use std::path::PathBuf;

use krylov_core::classical::ClassicalError;
use krylov_core::eval::EvalError;
use krylov_core::krylov::KrylovError;
use krylov_core::quantum::QuantumError;
use krylov_core::trainer::TrainError;
use krylov_core::transformer::TransformerError;
use thiserror::Error;

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Format { path: PathBuf, line: usize, message: String },
    #[error("{what} version mismatch: found {found}, expected {expected}")]
    VersionMismatch { what: String, found: String, expected: String },
    #[error("{}: payload checksum does not match the header", path.display())]
    ChecksumMismatch { path: PathBuf },
    #[error("dataset {} is tagged {found}, expected {expected}", path.display())]
    DataLeak { path: PathBuf, found: String, expected: String },
    #[error("record {index}: no valid sequence after {attempts} attempts")]
    GenerationExhausted { index: u64, attempts: usize },
    #[error(transparent)]
    Krylov(#[from] KrylovError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] TransformerError),
    #[error(transparent)]
    Quantum(#[from] QuantumError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> ExitCode {
        use CliError::*;
        match self {
            Usage(_) => ExitCode::Usage,
            Io { .. } | Format { .. } | VersionMismatch { .. } | ChecksumMismatch { .. } | DataLeak { .. } => ExitCode::Data,
            Quantum(QuantumError::DimensionTooLarge { .. } | QuantumError::NoSites) => ExitCode::Usage,
            GenerationExhausted { .. } | Krylov(_) | Quantum(_) | Classical(_) => ExitCode::Numerical,
            Train(TrainError::Diverged { .. }) => ExitCode::Numerical,
            Train(TrainError::Model(TransformerError::InvalidConfig(_))) | Model(TransformerError::InvalidConfig(_)) => ExitCode::Usage,
            Train(_) | Model(_) => ExitCode::Data,
            Eval(EvalError::Baseline(_)) => ExitCode::Numerical,
            Eval(_) => ExitCode::Data,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
