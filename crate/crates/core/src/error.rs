use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("gimbal lock: |R31| = {0} is too close to 1")]
    GimbalLock(f64),

    #[error("quaternion mean of an empty list")]
    EmptyInput,

    #[error("quaternion norm {0} is too small to normalize")]
    DegenerateNorm(f64),

    #[error("not a rotation: {0}")]
    NotARotation(String),

    #[error("invalid configuration: {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("cannot place {wanted} vehicles: capacity is {capacity}")]
    Unsatisfiable { wanted: usize, capacity: usize },

    #[error("too many frames filtered for split {split}: {skipped} skipped for {kept} kept")]
    InsufficientFrames { split: String, skipped: usize, kept: usize },

    #[error("{predictions} predictions for {samples} samples")]
    PredictionCountMismatch { predictions: usize, samples: usize },

    #[error("training split or validation split is empty")]
    EmptyDataset,

    #[error("temporal refinement over an empty window")]
    EmptyWindow,

    #[error("window of {window} frames exceeds the {frames} available")]
    WindowTooLarge { window: usize, frames: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Nn(#[from] radcam_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> CoreError {
    CoreError::ConfigInvalid {
        field: field.into(),
        reason: reason.into(),
    }
}
