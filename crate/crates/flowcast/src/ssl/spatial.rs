//! Balanced soft-clustering objective over regions.
//!
//! Cluster targets come from the augmented view's prototype scores, projected
//! onto the balanced transport polytope (rows sum to 1, columns to N/K) by
//! entropic scaling; the original view is trained to predict them with a
//! temperature-smoothed cross-entropy. No gradient flows through the
//! projection: the assignment is a constant once computed.

use crate::autodiff::{Tape, Tensor, VarId};

/// Soft cluster assignments in the balanced feasible set.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    /// `[N, K]`, non-negative.
    pub values: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

impl AssignmentMatrix {
    pub fn at(&self, region: usize, cluster: usize) -> f64 {
        self.values[region * self.k + cluster]
    }

    pub fn row_sum(&self, region: usize) -> f64 {
        self.values[region * self.k..(region + 1) * self.k].iter().sum()
    }

    pub fn column_sum(&self, cluster: usize) -> f64 {
        (0..self.n).map(|r| self.at(r, cluster)).sum()
    }

    /// Most likely cluster per region.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.n)
            .map(|r| {
                (0..self.k)
                    .max_by(|&a, &b| self.at(r, a).partial_cmp(&self.at(r, b)).unwrap())
                    .unwrap()
            })
            .collect()
    }

    /// Max marginal violation: max(|row−1|, |col−N/K|).
    pub fn feasibility_residual(&self) -> f64 {
        let mut res: f64 = 0.0;
        for r in 0..self.n {
            res = res.max((self.row_sum(r) - 1.0).abs());
        }
        let target = self.n as f64 / self.k as f64;
        for c in 0..self.k {
            res = res.max((self.column_sum(c) - target).abs());
        }
        res
    }
}

/// Result of the balanced projection.
#[derive(Debug, Clone)]
pub struct SinkhornOutcome {
    pub assignment: AssignmentMatrix,
    pub converged: bool,
    pub iterations: usize,
    /// Column residual after each full (column, row) rescaling round.
    pub residuals: Vec<f64>,
}

/// Raw prototype scores `H · Cᵀ` (`[N, D] × [K, D]ᵀ → [N, K]`); used for both
/// the original and the augmented view.
pub fn cluster_scores(tape: &mut Tape, embedding: VarId, prototypes: VarId) -> VarId {
    let proto_t = tape.transpose(prototypes);
    tape.matmul(embedding, proto_t)
}

/// Entropic projection of score matrix `logits` (`[N, K]` row-major) onto
/// the balanced polytope, by alternating column/row rescaling of
/// `exp(logits/eps)` in the log domain.
///
/// Iteration stops when the column residual after a row-normalization falls
/// below `tol` (rows are then exact by construction) or at `max_iters`; the
/// best iterate is returned either way with `converged` flagging which.
pub fn sinkhorn_project(
    logits: &[f64],
    n: usize,
    k: usize,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> SinkhornOutcome {
    assert!(eps > 0.0, "entropy weight must be positive");
    assert_eq!(logits.len(), n * k);
    let col_target = (n as f64 / k as f64).ln();
    // potentials: row u (size n), column v (size k), over z = logits/eps
    let z: Vec<f64> = logits.iter().map(|l| l / eps).collect();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; k];
    let logsumexp = |acc: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = acc.collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return mx;
        }
        vals.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx
    };

    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iters {
        iterations = it;
        // column step: match column sums to N/K
        for c in 0..k {
            let lse = logsumexp(&mut (0..n).map(|r| z[r * k + c] + u[r]));
            v[c] = col_target - lse;
        }
        // row step: match row sums to 1 (exact after this half-step)
        for r in 0..n {
            let lse = logsumexp(&mut (0..k).map(|c| z[r * k + c] + v[c]));
            u[r] = -lse;
        }
        // column residual of the current scaling
        let mut res: f64 = 0.0;
        let target = n as f64 / k as f64;
        for c in 0..k {
            let sum: f64 = (0..n).map(|r| (z[r * k + c] + u[r] + v[c]).exp()).sum();
            res = res.max((sum - target).abs());
        }
        residuals.push(res);
        if res < tol {
            converged = true;
            break;
        }
    }

    let mut values = vec![0.0; n * k];
    for r in 0..n {
        for c in 0..k {
            values[r * k + c] = (z[r * k + c] + u[r] + v[c]).exp();
        }
    }
    // final exact row normalization
    for r in 0..n {
        let sum: f64 = values[r * k..(r + 1) * k].iter().sum();
        for c in 0..k {
            values[r * k + c] /= sum;
        }
    }
    SinkhornOutcome {
        assignment: AssignmentMatrix { values, n, k },
        converged,
        iterations,
        residuals,
    }
}

/// Clustering cross-entropy: the original view's scores, smoothed by the
/// temperature, predict the (constant) balanced assignment. Summed over
/// regions.
pub fn spatial_loss(
    tape: &mut Tape,
    logits_original: VarId,
    assignment: &AssignmentMatrix,
    temperature: f64,
) -> VarId {
    assert!(temperature > 0.0);
    let shape = tape.shape(logits_original).to_vec();
    assert_eq!(shape, vec![assignment.n, assignment.k]);
    let scaled = tape.scale(logits_original, 1.0 / temperature);
    let log_probs = tape.log_softmax_axis(scaled, 1);
    let targets = tape.constant(Tensor::new(
        vec![assignment.n, assignment.k],
        assignment.values.clone(),
    ));
    let weighted = tape.mul(log_probs, targets);
    let total = tape.sum_all(weighted);
    tape.neg(total)
}
