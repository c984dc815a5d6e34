//! Sliding-window sample assembly and the chronological split.

use std::ops::Range;

use super::FlowDataset;
use crate::autodiff::Tensor;

/// One supervised sample: an input window and the flow matrix one step after
/// the most recent input step.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[T, N, 2]` with `T = daily_steps + recent_steps`; daily slices come
    /// first (oldest day first), then the recent slices in time order.
    pub input: Tensor,
    /// `[N, 2]` flows at `target_step_index`.
    pub target: Tensor,
    pub target_step_index: usize,
}

/// Assemble samples with a stride-1 sliding window.
///
/// For target step `m`, the input concatenates the same-clock-time slices of
/// the `daily_steps` previous days (`m − d·steps_per_day`, oldest first) and
/// then the `recent_steps` immediately preceding steps `m−recent..m`. Targets
/// run over every step where the full history exists.
pub fn make_windows(
    dataset: &FlowDataset,
    recent_steps: usize,
    daily_steps: usize,
    steps_per_day: usize,
) -> Vec<Sample> {
    assert!(recent_steps >= 1);
    assert!(steps_per_day >= 1);
    let s_total = dataset.num_steps();
    let n = dataset.num_regions();
    let t_len = daily_steps + recent_steps;
    let first_target = recent_steps.max(daily_steps * steps_per_day);
    let mut samples = Vec::new();
    for m in first_target..s_total {
        let mut data = Vec::with_capacity(t_len * n * 2);
        for d in (1..=daily_steps).rev() {
            data.extend_from_slice(dataset.step(m - d * steps_per_day).data());
        }
        for u in (m - recent_steps)..m {
            data.extend_from_slice(dataset.step(u).data());
        }
        samples.push(Sample {
            input: Tensor::new(vec![t_len, n, 2], data),
            target: dataset.step(m),
            target_step_index: m,
        });
    }
    samples
}

/// Chronological index ranges over a sample list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 7:1:2 chronological split; the ranges are disjoint, ordered, and cover
/// `0..num_samples`.
pub fn split_chronological(num_samples: usize) -> SplitRanges {
    let train_end = num_samples * 7 / 10;
    let val_end = num_samples * 8 / 10;
    SplitRanges {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..num_samples,
    }
}
