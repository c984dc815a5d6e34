//! Per-channel min-max normalization to [-1, 1], fit on the training split.

use serde::{Deserialize, Serialize};

use super::{DataError, Sample};
use crate::autodiff::Tensor;

/// Linear map per flow channel: training min → −1, training max → +1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Scaler {
    /// Fit on the values the training samples actually contain (inputs and
    /// targets); later splits must not be passed in.
    pub fn fit(train_samples: &[Sample]) -> Result<Self, DataError> {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        let mut scan = |t: &Tensor| {
            for pair in t.data().chunks_exact(2) {
                for c in 0..2 {
                    min[c] = min[c].min(pair[c]);
                    max[c] = max[c].max(pair[c]);
                }
            }
        };
        for s in train_samples {
            scan(&s.input);
            scan(&s.target);
        }
        for c in 0..2 {
            if !(max[c] > min[c]) {
                return Err(DataError::DegenerateScale {
                    channel: c,
                    value: min[c],
                });
            }
        }
        Ok(Scaler { min, max })
    }

    /// Normalize a tensor whose trailing axis is the 2 flow channels.
    pub fn transform(&self, t: &Tensor) -> Tensor {
        assert_eq!(*t.shape().last().unwrap(), 2);
        let mut data = Vec::with_capacity(t.numel());
        for pair in t.data().chunks_exact(2) {
            for c in 0..2 {
                data.push(2.0 * (pair[c] - self.min[c]) / (self.max[c] - self.min[c]) - 1.0);
            }
        }
        Tensor::new(t.shape().to_vec(), data)
    }

    pub fn inverse_transform(&self, t: &Tensor) -> Tensor {
        assert_eq!(*t.shape().last().unwrap(), 2);
        let mut data = Vec::with_capacity(t.numel());
        for pair in t.data().chunks_exact(2) {
            for c in 0..2 {
                data.push((pair[c] + 1.0) / 2.0 * (self.max[c] - self.min[c]) + self.min[c]);
            }
        }
        Tensor::new(t.shape().to_vec(), data)
    }
}
