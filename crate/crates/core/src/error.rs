use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("unsupported datatype: {0}")]
    UnsupportedDatatype(String),

    #[error("non-invertible affine (|det| = {det:e})")]
    NonInvertibleAffine { det: f64 },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown label {0}")]
    UnknownLabel(u16),

    #[error("unknown structure name {0:?}")]
    UnknownStructure(String),

    #[error("insufficient landmarks: {found} common levels, at least {required} required")]
    InsufficientLandmarks { found: usize, required: usize },

    #[error("degenerate landmark configuration: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("point {0:?} outside domain")]
    OutsideDomain([f64; 3]),

    #[error("no protected structures in model; proximity alarm cannot function")]
    NoProtectedStructures,

    #[error("nothing to export")]
    NothingToExport,

    #[error("registration aborted at iteration {iteration}: {reason}")]
    RegistrationAborted {
        iteration: usize,
        reason: String,
        trace: Vec<crate::deform::TraceRow>,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("cancelled")]
    Cancelled,

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stage name when the error came out of a pipeline stage.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// The underlying error with any stage wrapper removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
