//! Spatio-temporal graph encoder: gated causal temporal convolutions and
//! symmetric-normalized graph convolutions in a sandwich stacking, plus the
//! per-region MLP prediction head.

mod encoder;
mod params;

pub use encoder::{
    gated_causal_conv, graph_conv, mlp_predict, normalize_adjacency, st_encode, Encoded,
};
pub use params::{init_params, ModelDims, ModelVars};

use thiserror::Error;

/// Static encoder geometry. The time axis must collapse to exactly one step
/// across all temporal convolutions before the final squeeze.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Embedding width D.
    pub dim: usize,
    /// Temporal kernel size k.
    pub kernel_size: usize,
    /// Number of TC→SC→TC blocks before the closing temporal convolution.
    pub num_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            kernel_size: 3,
            num_blocks: 1,
        }
    }
}

impl EncoderConfig {
    /// TC layers across all blocks plus the closing layer.
    pub fn num_tc_layers(&self) -> usize {
        2 * self.num_blocks + 1
    }

    pub fn num_sc_layers(&self) -> usize {
        self.num_blocks
    }

    /// Input length the stack collapses to a single step.
    pub fn required_input_len(&self) -> usize {
        self.num_tc_layers() * (self.kernel_size - 1) + 1
    }

    /// Reject geometries whose time axis does not collapse to exactly 1.
    pub fn validate(&self, input_len: usize) -> Result<(), ModelError> {
        if self.dim == 0 || self.kernel_size < 2 || self.num_blocks == 0 {
            return Err(ModelError::Architecture(format!(
                "dim {} / kernel {} / blocks {} out of range",
                self.dim, self.kernel_size, self.num_blocks
            )));
        }
        let required = self.required_input_len();
        if input_len != required {
            return Err(ModelError::Architecture(format!(
                "input length {} does not collapse to 1: {} TC layers with kernel {} need exactly {}",
                input_len,
                self.num_tc_layers(),
                self.kernel_size,
                required
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("shape error: {0}")]
    Shape(String),
}
