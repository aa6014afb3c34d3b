use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GaitError>;

#[derive(Debug, Error)]
pub enum GaitError {
    #[error("silhouette has no nonzero pixel")]
    EmptySilhouette,

    #[error("silhouette alignment did not settle")]
    UnstableAlignment,

    #[error("malformed dataset layout at {path}: {reason}")]
    MalformedLayout { path: PathBuf, reason: String },

    #[error("protocol {protocol} needs {required} identities, index has {available}")]
    InsufficientIdentities {
        protocol: String,
        required: usize,
        available: usize,
    },

    #[error("sequence has {available} frames, {required} required")]
    SequenceTooShort { available: usize, required: usize },

    #[error("not enough data: {0}")]
    NotEnoughData(String),

    #[error("feature height {height} is not divisible into {strips} strips")]
    IndivisibleHeight { height: usize, strips: usize },

    #[error("temporal window of radius {radius} needs at least {required} frames, got {available}")]
    SequenceTooShortForWindow {
        radius: usize,
        required: usize,
        available: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("row {row} has degenerate norm {norm:e}")]
    DegenerateNorm { row: usize, norm: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("checkpoint version or shape mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("gallery has no entries for view {view}")]
    EmptyGalleryView { view: u32 },

    #[error("identity {identity} has no {condition} sequences")]
    MissingCondition { identity: u32, condition: String },

    #[error("empty evaluation set: {0}")]
    EmptyEvaluation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("png decode failed for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GaitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GaitError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            GaitError::Config(_) => 2,
            GaitError::DegenerateNorm { .. }
            | GaitError::NonFiniteLoss { .. } => 4,
            _ => 3,
        }
    }
}
