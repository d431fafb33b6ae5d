use std::path::PathBuf;

use prism_diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrismError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{dims:?} is not divisible by patch {patch:?}; pad each axis up to {suggested:?}")]
    Indivisible {
        dims: Vec<usize>,
        patch: Vec<usize>,
        suggested: Vec<usize>,
    },
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("no events in the data")]
    NoEvents,
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("Cox fit diverged ({0}); increase the ridge penalty")]
    Divergence(String),
    #[error("no cases or no controls at horizon {0}")]
    EmptyHorizon(f64),
    #[error("degenerate stratification: all risks identical")]
    DegenerateStratification,
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("missing feature `{0}`")]
    MissingFeature(String),
    #[error("prompt selects no features")]
    EmptySelection,
    #[error("not enough unique prompts: requested {requested}, at most {achievable} achievable")]
    InsufficientPrompts { requested: usize, achievable: usize },
    #[error("training aborted at epoch {epoch}: non-finite loss")]
    NonFiniteLoss { epoch: usize },
    #[error("too few events to stratify: {0}")]
    TooFewEvents(String),
}

pub type Result<T> = std::result::Result<T, PrismError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| PrismError::Io {
            path: path.into(),
            source,
        })
    }
}
