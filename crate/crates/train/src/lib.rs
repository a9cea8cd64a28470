//! Training-time machinery: contrastive map sampling and loss, collision and
//! variety losses, evaluation metrics, the optimizer loop and a
//! finite-difference gradient checker.
//!
//! Nothing here is needed to run a trained predictor; inference lives in
//! `ecam-core` alone.

pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nce;
pub mod pretrain;
pub mod sampling;
pub mod trainer;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] ecam_core::Error),
    #[error("{0}")]
    Invalid(String),
    /// Loss or gradient became NaN/inf; `diagnostic` describes the batch.
    #[error("non-finite loss: {message}")]
    NonFinite {
        message: String,
        diagnostic: serde_json::Value,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
