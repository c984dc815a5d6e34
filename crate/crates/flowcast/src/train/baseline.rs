//! Historical-average reference predictor: per-region mean of the training
//! flows at the same time-of-day slot.

use super::{Metrics, TrainError};
use crate::autodiff::Tensor;
use crate::data::{FlowDataset, Sample};

/// Mean training flow (`steps 0..=train_end_step`) at `target_step`'s clock
/// slot, per region and channel. Errors if the slot was never observed.
pub fn historical_average_predict(
    dataset: &FlowDataset,
    steps_per_day: usize,
    train_end_step: usize,
    target_step: usize,
) -> Result<Tensor, TrainError> {
    let n = dataset.num_regions();
    let slot = target_step % steps_per_day;
    let mut sums = vec![0.0f64; n * 2];
    let mut count = 0usize;
    let mut u = slot;
    while u <= train_end_step.min(dataset.num_steps() - 1) {
        let step = dataset.step(u);
        for (s, v) in sums.iter_mut().zip(step.data()) {
            *s += v;
        }
        count += 1;
        u += steps_per_day;
    }
    if count == 0 {
        return Err(TrainError::Config(format!(
            "no training observation at clock slot {slot}"
        )));
    }
    let inv = 1.0 / count as f64;
    sums.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::new(vec![n, 2], sums))
}

/// Metrics of the historical-average predictor over `samples`, using only
/// flows up to `train_end_step` as history.
pub fn evaluate_historical_average(
    dataset: &FlowDataset,
    steps_per_day: usize,
    train_end_step: usize,
    samples: &[Sample],
) -> Result<Metrics, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("evaluation needs at least one sample".into()));
    }
    let mut acc = super::metrics::MetricsAccumulator::new();
    for sample in samples {
        let pred = historical_average_predict(
            dataset,
            steps_per_day,
            train_end_step,
            sample.target_step_index,
        )?;
        acc.add_matrix(pred.data(), sample.target.data());
    }
    Ok(acc.finish(samples.len()))
}
