use std::path::PathBuf;

/// Errors surfaced by the library. Contract violations carry enough context
/// to name the offending value.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown token {token:?} not in vocabulary")]
    UnknownToken { token: String },

    #[error("non-finite value in {place}")]
    NonFinite { place: String },

    #[error("dimension mismatch in {place}: expected {expected}, got {got}")]
    DimMismatch {
        place: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("interpolation weight {alpha} outside [0, 1]")]
    AlphaOutOfRange { alpha: f64 },

    #[error("checkpoint format version {found} unsupported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint scales {checkpoint:?} do not match requested scales {requested:?}")]
    CheckpointScaleMismatch {
        checkpoint: Vec<usize>,
        requested: Vec<usize>,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("embedding dimension {got} does not match configured dimension {expected}")]
    EmbeddingDim { expected: usize, got: usize },

    #[error("training aborted at step {step}: non-finite {what}; last good checkpoint retained")]
    TrainingDiverged { step: u64, what: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
