//! Training harness: prediction/joint losses, the four-stage batch step,
//! evaluation metrics, checkpointing, the historical-average reference, and
//! the whole-model gradient check.

mod baseline;
mod checkpoint;
mod config;
mod gradcheck;
pub(crate) mod metrics;
mod trainer;

pub use baseline::{evaluate_historical_average, historical_average_predict};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use gradcheck::{build_joint_loss_instance, run_joint_gradcheck, JointLossInstance};
pub use metrics::{purity, Metrics};
pub use trainer::{
    cluster_snapshot, evaluate, inspect_augmentation, prediction_loss, train, write_assignments_csv,
    write_history_csv, EpochStats, InspectOutput, TrainOutput,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Diff(#[from] crate::autodiff::DiffError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
