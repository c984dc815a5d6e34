//! Grid-flow dataset format, adjacency construction, windowing, scaling,
//! and the synthetic generator.

mod dataset;
mod grid;
mod scaler;
mod synth;
mod window;

pub use dataset::{load_dataset, load_labels, save_dataset, FlowDataset};
pub use grid::{build_grid_adjacency, Adjacency, Neighborhood};
pub use scaler::Scaler;
pub use synth::{synth_generate, SynthSpec};
pub use window::{make_windows, split_chronological, Sample, SplitRanges};

use crate::autodiff::Tensor;
use thiserror::Error;

/// A regions-as-nodes graph carrying adjacency and one flow window; the unit
/// the encoder consumes, both as observed and after augmentation.
#[derive(Debug, Clone)]
pub struct TrafficFlowGraph {
    pub adjacency: Adjacency,
    /// `[T, N, 2]` inflow/outflow window.
    pub window: Tensor,
}

impl TrafficFlowGraph {
    pub fn new(adjacency: Adjacency, window: Tensor) -> Self {
        assert_eq!(window.shape().len(), 3, "window must be [T, N, 2]");
        assert_eq!(window.shape()[1], adjacency.num_nodes(), "window/adjacency N mismatch");
        assert_eq!(window.shape()[2], 2, "window must carry 2 flow channels");
        TrafficFlowGraph { adjacency, window }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid meta descriptor: {0}")]
    Meta(String),
    #[error("flow blob length mismatch: expected {expected} bytes, found {actual}")]
    BlobLength { expected: usize, actual: usize },
    #[error("negative flow value {value} at flat index {index}")]
    NegativeValue { index: usize, value: f64 },
    #[error("non-finite flow value at flat index {index}")]
    NonFinite { index: usize },
    #[error("degenerate scale on channel {channel}: min == max == {value}")]
    DegenerateScale { channel: usize, value: f64 },
    #[error("regime count {regimes} invalid for {regions} regions (need 2 ≤ regimes ≤ regions)")]
    RegimeCount { regimes: usize, regions: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
