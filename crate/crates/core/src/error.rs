use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coincident positions: end effector sits on the human")]
    CoincidentPositions,
    #[error("degenerate feature range for {0}: max equals min")]
    DegenerateFeatureRange(String),
    #[error("empty state set")]
    EmptyStateSet,
    #[error("state set needs at least {min} states, got {got}")]
    TooFewStates { min: usize, got: usize },
    #[error("modified logistic pole at phi = {0}")]
    Pole(f64),
    #[error("unknown calibrated function id `{0}`")]
    UnknownFunction(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("unknown context element `{0}`")]
    UnknownContext(String),
    #[error("invalid scenario `{0}`")]
    InvalidScenario(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("collapsed logit range: max equals min ({0})")]
    CollapsedLogitRange(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("no evaluable pairs: every pair is within the equivalence threshold")]
    NoEvaluablePairs,
    #[error("calibrated representation is always frozen")]
    CalibratedAlwaysFrozen,
    #[error("could not draw {wanted} non-equivalent queries after {attempts} attempts")]
    QueryBudgetExhausted { wanted: usize, attempts: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
