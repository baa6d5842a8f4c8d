use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Covariance could not be factorized even at the largest jitter of the ladder.
    #[error("covariance matrix is not positive definite (last jitter tried: {jitter:e})")]
    NonPositiveDefinite { jitter: f64 },

    #[error("sample at t={time} h falls in epoch {epoch}, past the last epoch {num_epochs}")]
    EpochOverflow {
        time: f64,
        epoch: usize,
        num_epochs: usize,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("cohort contains no patients")]
    EmptyCohort,

    #[error("record `{0}` has no label")]
    UnlabeledRecord(String),

    #[error("expert {expert} collapsed (responsibility mass {mass:.3} < 1 patient)")]
    DegenerateCluster { expert: usize, mass: f64 },

    #[error("every initial-epoch offset overflows the epoch grid")]
    AllOffsetsInvalid,

    #[error("no positive (label 1) patients")]
    NoPositives,

    #[error("no negative (label 0) patients")]
    NoNegatives,

    #[error("true-positive-rate target {0} cannot be reached")]
    TargetUnreachable(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::EmptyCohort
            | Error::UnlabeledRecord(_)
            | Error::Config(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::InvalidParams(_)
            | Error::NoPositives
            | Error::NoNegatives
            | Error::TargetUnreachable(_) => 2,
            Error::SchemaMismatch(_) => 3,
            Error::NonPositiveDefinite { .. }
            | Error::EpochOverflow { .. }
            | Error::DegenerateData(_)
            | Error::DegenerateCluster { .. }
            | Error::AllOffsetsInvalid => 4,
        }
    }
}
