use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("molecule has no masked-in atoms")]
    EmptyMolecule,
    #[error("invalid molecule: {0}")]
    InvalidMolecule(String),
    #[error("rotation is not orthogonal (max |RᵀR - I| = {0:e})")]
    InvalidMotion(f64),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid step pair: need r < t, got r={r}, t={t}")]
    InvalidStepPair { t: usize, r: usize },
    #[error("coordinate block is not centered (|com| = {0:e})")]
    NotCentered(f64),
    #[error("forward cache does not match the parameters or input")]
    StaleCache,
    #[error("coincident atoms {0} and {1}")]
    SingularGeometry(usize, usize),
    #[error("minimization failed: {0}")]
    MinimizationFailed(String),
    #[error("force engine failed: {reason}")]
    EngineFailure { reason: String, penalty: bool },
    #[error("force engine timed out after {secs} s")]
    EngineTimeout { secs: u64, penalty: bool },
    #[error("property needs at least two atoms")]
    DegenerateProperty,
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("ratio terms refer to different steps or trajectories")]
    MisalignedRatio,
    #[error("need at least two rewards, got {0}")]
    InsufficientBatch(usize),
    #[error("update aborted: non-finite gradient")]
    AbortUpdate,
    #[error("sampling budget of {0} molecules exceeded")]
    SamplingBudgetExceeded(usize),
    #[error("xyz parse error at line {line}: {msg}")]
    Xyz { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite objective at epoch {0}")]
    NonFiniteObjective(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that downstream reward code maps to the fixed penalty.
    pub fn is_penalty(&self) -> bool {
        match self {
            Error::EngineFailure { penalty, .. } | Error::EngineTimeout { penalty, .. } => *penalty,
            Error::SingularGeometry(..) | Error::EmptyMolecule | Error::DegenerateProperty => true,
            _ => false,
        }
    }
}
