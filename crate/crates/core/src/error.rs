use thiserror::Error;

use riskid_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
    #[error("intrinsics are not invertible (fx={fx}, fy={fy})")]
    SingularIntrinsics { fx: f64, fy: f64 },
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dims {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("mask has no nonzero cell")]
    EmptyRegion,
    #[error("unknown tracklet id {0}")]
    UnknownTracklet(u32),
    #[error("no candidate objects")]
    NoCandidates,
    #[error("label layers are empty")]
    EmptyLabels,
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("no positive samples, average precision is undefined")]
    NoPositives,
    #[error("stage 2 training needs a stage-1 checkpoint")]
    MissingStageOneCheckpoint,
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(what: &'static str, msg: impl Into<String>) -> Self {
        Self::Invalid { what, msg: msg.into() }
    }

    /// Short machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::SingularIntrinsics { .. } => "singular_intrinsics",
            Error::Invalid { .. } => "invalid",
            Error::Dims { .. } => "dims",
            Error::EmptyRegion => "empty_region",
            Error::UnknownTracklet(_) => "unknown_tracklet",
            Error::NoCandidates => "no_candidates",
            Error::EmptyLabels => "empty_labels",
            Error::EmptyInput(_) => "empty_input",
            Error::NoPositives => "no_positives",
            Error::MissingStageOneCheckpoint => "missing_stage1_checkpoint",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
