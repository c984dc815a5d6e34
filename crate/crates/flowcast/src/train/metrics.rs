//! Evaluation metrics on de-normalized flows.

use serde::{Deserialize, Serialize};

/// Per-channel MAE and MAPE. MAPE averages `|x̂−x|/x` over entries whose true
/// value is at least 1.0 and reports percent; entries below the threshold are
/// counted in the `mape_excluded_*` fields, and a channel where every entry
/// fell below it carries no MAPE at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_in: f64,
    pub mae_out: f64,
    pub mape_in_pct: Option<f64>,
    pub mape_out_pct: Option<f64>,
    pub mape_excluded_in: usize,
    pub mape_excluded_out: usize,
    pub num_samples: usize,
}

impl Metrics {
    /// Mean of the two channel MAEs.
    pub fn mae_mean(&self) -> f64 {
        0.5 * (self.mae_in + self.mae_out)
    }
}

/// Streaming accumulator over (predicted, true) inflow/outflow pairs.
#[derive(Debug, Default)]
pub(crate) struct MetricsAccumulator {
    abs_err: [f64; 2],
    mape_sum: [f64; 2],
    mape_count: [usize; 2],
    excluded: [usize; 2],
    entries: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_pair(&mut self, predicted: &[f64], truth: &[f64]) {
        self.entries += 1;
        for c in 0..2 {
            let err = (predicted[c] - truth[c]).abs();
            self.abs_err[c] += err;
            if truth[c] >= 1.0 {
                self.mape_sum[c] += err / truth[c];
                self.mape_count[c] += 1;
            } else {
                self.excluded[c] += 1;
            }
        }
    }

    /// Add every region of a predicted/true `[N, 2]` pair.
    pub fn add_matrix(&mut self, predicted: &[f64], truth: &[f64]) {
        for (p, t) in predicted.chunks_exact(2).zip(truth.chunks_exact(2)) {
            self.add_pair(p, t);
        }
    }

    pub fn finish(self, num_samples: usize) -> Metrics {
        let n = self.entries as f64;
        let mape = |c: usize| {
            if self.mape_count[c] == 0 {
                None
            } else {
                Some(100.0 * self.mape_sum[c] / self.mape_count[c] as f64)
            }
        };
        Metrics {
            mae_in: self.abs_err[0] / n,
            mae_out: self.abs_err[1] / n,
            mape_in_pct: mape(0),
            mape_out_pct: mape(1),
            mape_excluded_in: self.excluded[0],
            mape_excluded_out: self.excluded[1],
            num_samples,
        }
    }
}

/// Fraction of regions whose cluster's majority label matches their own:
/// `Σ_k max_l |cluster k ∩ label l| / N`.
pub fn purity(cluster_of: &[usize], label_of: &[usize]) -> f64 {
    assert_eq!(cluster_of.len(), label_of.len());
    assert!(!cluster_of.is_empty());
    let num_clusters = cluster_of.iter().max().unwrap() + 1;
    let num_labels = label_of.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; num_clusters * num_labels];
    for (&c, &l) in cluster_of.iter().zip(label_of) {
        counts[c * num_labels + l] += 1;
    }
    let majority_total: usize = (0..num_clusters)
        .map(|c| {
            (0..num_labels)
                .map(|l| counts[c * num_labels + l])
                .max()
                .unwrap_or(0)
        })
        .sum();
    majority_total as f64 / cluster_of.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_predictions_give_zero_metrics() {
        let mut acc = MetricsAccumulator::new();
        acc.add_matrix(&[3.0, 7.0, 2.0, 5.0], &[3.0, 7.0, 2.0, 5.0]);
        let m = acc.finish(1);
        assert_eq!(m.mae_in, 0.0);
        assert_eq!(m.mae_out, 0.0);
        assert_eq!(m.mape_in_pct, Some(0.0));
        assert_eq!(m.mape_out_pct, Some(0.0));
    }

    #[test]
    fn hand_case_mae_and_mape() {
        // one channel's entries (10, 20) predicted as (12, 16):
        // MAE = (2+4)/2 = 3, MAPE = (0.2+0.2)/2 = 20%
        let mut acc = MetricsAccumulator::new();
        acc.add_pair(&[12.0, 12.0], &[10.0, 10.0]);
        acc.add_pair(&[16.0, 16.0], &[20.0, 20.0]);
        let m = acc.finish(1);
        assert!((m.mae_in - 3.0).abs() < 1e-12);
        assert!((m.mape_in_pct.unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn small_true_values_are_excluded_from_mape() {
        let mut acc = MetricsAccumulator::new();
        acc.add_pair(&[2.0, 2.0], &[0.5, 0.5]); // below the 1.0 threshold
        acc.add_pair(&[2.0, 2.0], &[4.0, 4.0]);
        let m = acc.finish(2);
        assert_eq!(m.mape_excluded_in, 1);
        assert!((m.mape_in_pct.unwrap() - 50.0).abs() < 1e-12);
        // everything excluded → undefined marker
        let mut acc2 = MetricsAccumulator::new();
        acc2.add_pair(&[1.0, 1.0], &[0.2, 0.9]);
        let m2 = acc2.finish(1);
        assert_eq!(m2.mape_in_pct, None);
        assert_eq!(m2.mape_out_pct, None);
        assert_eq!(m2.mape_excluded_in, 1);
    }

    #[test]
    fn purity_perfect_and_mixed() {
        assert_eq!(purity(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(purity(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
        // two clusters, one mixed: majorities 2 + 1 of 4
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 0, 0, 1]), 0.75);
    }

    #[test]
    fn metrics_serialize_null_mape() {
        let m = Metrics {
            mae_in: 1.0,
            mae_out: 2.0,
            mape_in_pct: None,
            mape_out_pct: Some(12.5),
            mape_excluded_in: 7,
            mape_excluded_out: 0,
            num_samples: 3,
        };
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"mape_in_pct\":null"));
        assert!(json.contains("\"mape_out_pct\":12.5"));
    }
}
