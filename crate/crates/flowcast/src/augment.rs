//! Heterogeneity measurement and the two adaptive augmentation phases:
//! relevance-guided traffic masking and similarity-guided edge rewiring.
//!
//! Everything here is plain (non-differentiated) array math: the Bernoulli
//! draws are treated as constants, so no gradient flows through this module.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_lane, Tensor};
use crate::data::Adjacency;

/// Per-region relevance of each time step, softmax-normalized over time.
#[derive(Debug, Clone)]
pub struct RelevanceWeights {
    /// `[T₁, N]`, each column sums to 1.
    pub values: Vec<f64>,
    pub t1: usize,
    pub n: usize,
}

impl RelevanceWeights {
    pub fn at(&self, t: usize, region: usize) -> f64 {
        self.values[t * self.n + region]
    }

    pub fn column_sum(&self, region: usize) -> f64 {
        (0..self.t1).map(|t| self.at(t, region)).sum()
    }
}

/// Relevance of each time step to a region's overall pattern: the raw score
/// is the projection of the step embedding onto the relevance vector, then
/// scores are softmax-normalized over the time axis per region.
pub fn region_relevance(first_tc: &Tensor, relevance_weight: &[f64]) -> RelevanceWeights {
    let shape = first_tc.shape();
    let (t1, n, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(relevance_weight.len(), d);
    let mut scores = vec![0.0; t1 * n];
    for t in 0..t1 {
        for r in 0..n {
            let row = &first_tc.data()[(t * n + r) * d..(t * n + r + 1) * d];
            scores[t * n + r] = row.iter().zip(relevance_weight).map(|(b, w)| b * w).sum();
        }
    }
    // softmax per region over the time axis
    let mut values = vec![0.0; t1 * n];
    let mut lane = vec![0.0; t1];
    let mut out = vec![0.0; t1];
    for r in 0..n {
        for t in 0..t1 {
            lane[t] = scores[t * n + r];
        }
        softmax_lane(&lane, &mut out);
        for t in 0..t1 {
            values[t * n + r] = out[t];
        }
    }
    RelevanceWeights { values, t1, n }
}

/// Relevance-weighted aggregation of a region's embedding sequence: `[N, D]`.
pub fn region_summary(first_tc: &Tensor, relevance: &RelevanceWeights) -> Tensor {
    let shape = first_tc.shape();
    let (t1, n, d) = (shape[0], shape[1], shape[2]);
    assert_eq!((relevance.t1, relevance.n), (t1, n));
    let mut out = vec![0.0; n * d];
    for t in 0..t1 {
        for r in 0..n {
            let w = relevance.at(t, r);
            let row = &first_tc.data()[(t * n + r) * d..(t * n + r + 1) * d];
            let acc = &mut out[r * d..(r + 1) * d];
            for (a, b) in acc.iter_mut().zip(row) {
                *a += w * b;
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Pairwise cosine similarities of region summaries. A larger entry means a
/// stronger pattern dependency, i.e. a lower heterogeneity degree.
#[derive(Debug, Clone)]
pub struct HeterogeneityMatrix {
    /// `[N, N]`, symmetric, entries in [-1, 1].
    pub values: Vec<f64>,
    pub n: usize,
}

impl HeterogeneityMatrix {
    pub fn at(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.n + n]
    }

    /// Similarity mapped to [0, 1].
    pub fn unit_at(&self, m: usize, n: usize) -> f64 {
        (self.at(m, n) + 1.0) / 2.0
    }
}

/// Cosine similarity matrix of the rows of `summaries` (`[N, D]`). A region
/// whose summary has zero norm is degenerate: it gets similarity 0 against
/// everything (its own diagonal included) and a warning is logged.
pub fn heterogeneity(summaries: &Tensor) -> HeterogeneityMatrix {
    let (n, d) = (summaries.shape()[0], summaries.shape()[1]);
    let norms: Vec<f64> = (0..n)
        .map(|r| {
            summaries.data()[r * d..(r + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    for (r, &nm) in norms.iter().enumerate() {
        if nm == 0.0 {
            log::warn!("region {r} has a zero-norm summary; treating its similarities as 0");
        }
    }
    let mut values = vec![0.0; n * n];
    for m in 0..n {
        values[m * n + m] = if norms[m] == 0.0 { 0.0 } else { 1.0 };
        for r in (m + 1)..n {
            let v = if norms[m] == 0.0 || norms[r] == 0.0 {
                0.0
            } else {
                let a = &summaries.data()[m * d..(m + 1) * d];
                let b = &summaries.data()[r * d..(r + 1) * d];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (dot / (norms[m] * norms[r])).clamp(-1.0, 1.0)
            };
            values[m * n + r] = v;
            values[r * n + m] = v;
        }
    }
    HeterogeneityMatrix { values, n }
}

/// Upper bound on any single mask/rewire probability, so no position is
/// perturbed near-deterministically.
const PROB_CAP: f64 = 0.5;

/// Mask probabilities over the full `[T, N]` window.
///
/// Relevance covers only the trailing T₁ steps (the first temporal
/// convolution shortens the window); the leading steps take their region's
/// mean relevance. Per region the relevance profile is min-max rescaled to
/// [0, 1]; probabilities are `ratio·(1−p̂)/mean(1−p̂)` capped at 0.5, which
/// makes the expected masked fraction equal the ratio when no cap binds.
pub fn mask_probabilities(relevance: &RelevanceWeights, ratio: f64, t_total: usize) -> Vec<f64> {
    assert!((0.0..=1.0).contains(&ratio));
    let (t1, n) = (relevance.t1, relevance.n);
    assert!(t_total >= t1);
    let lead = t_total - t1;
    // per-region min-max rescale
    let mut rescaled = vec![0.0; t1 * n];
    for r in 0..n {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..t1 {
            let v = relevance.at(t, r);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for t in 0..t1 {
            rescaled[t * n + r] = if hi > lo {
                (relevance.at(t, r) - lo) / (hi - lo)
            } else {
                0.5
            };
        }
    }
    let mut full = vec![0.0; t_total * n];
    for r in 0..n {
        let mean_r: f64 = (0..t1).map(|t| rescaled[t * n + r]).sum::<f64>() / t1 as f64;
        for t in 0..lead {
            full[t * n + r] = mean_r;
        }
        for t in 0..t1 {
            full[(lead + t) * n + r] = rescaled[t * n + r];
        }
    }
    let mean_irrelevance: f64 =
        full.iter().map(|p| 1.0 - p).sum::<f64>() / (t_total * n) as f64;
    if mean_irrelevance <= 0.0 {
        return vec![0.0; t_total * n];
    }
    full.iter()
        .map(|p| (ratio * (1.0 - p) / mean_irrelevance).clamp(0.0, PROB_CAP))
        .collect()
}

fn apply_mask(window: &Tensor, probs: &[f64], rng: &mut ChaCha8Rng) -> Tensor {
    let shape = window.shape().to_vec();
    let (t_total, n) = (shape[0], shape[1]);
    let mut out = window.clone();
    for t in 0..t_total {
        for r in 0..n {
            if rng.gen::<f64>() < probs[t * n + r] {
                out.data_mut()[(t * n + r) * 2] = 0.0;
                out.data_mut()[(t * n + r) * 2 + 1] = 0.0;
            }
        }
    }
    out
}

/// Relevance-adaptive traffic masking: low-relevance positions are zeroed
/// (both channels) with higher probability; expected masked fraction ≈ ratio.
pub fn traffic_mask(
    window: &Tensor,
    relevance: &RelevanceWeights,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    if ratio == 0.0 {
        return window.clone();
    }
    let probs = mask_probabilities(relevance, ratio, window.shape()[0]);
    apply_mask(window, &probs, rng)
}

/// Uniform-probability masking at the same expected rate (ablation variant).
pub fn uniform_mask(window: &Tensor, ratio: f64, rng: &mut ChaCha8Rng) -> Tensor {
    assert!((0.0..=1.0).contains(&ratio));
    if ratio == 0.0 {
        return window.clone();
    }
    let (t_total, n) = (window.shape()[0], window.shape()[1]);
    let probs = vec![ratio.min(PROB_CAP); t_total * n];
    apply_mask(window, &probs, rng)
}

/// Removal probability per existing edge, aligned with `adjacency.edges()`.
/// If every pair is maximally similar there is nothing to debias and all
/// probabilities are zero.
pub fn removal_probabilities(
    adjacency: &Adjacency,
    similarity: &HeterogeneityMatrix,
    ratio: f64,
) -> Vec<f64> {
    let edges = adjacency.edges();
    if edges.is_empty() {
        return Vec::new();
    }
    let dissim: Vec<f64> = edges
        .iter()
        .map(|&(m, n)| 1.0 - similarity.unit_at(m, n))
        .collect();
    let mean: f64 = dissim.iter().sum::<f64>() / dissim.len() as f64;
    if mean <= 1e-15 {
        return vec![0.0; edges.len()];
    }
    dissim
        .iter()
        .map(|q| (ratio * q / mean).clamp(0.0, PROB_CAP))
        .collect()
}

/// Addition probability per non-adjacent pair `(m, n)` with `m < n`. The
/// total addition budget is `ratio·|E|`, distributed proportionally to the
/// pairwise similarity.
pub fn addition_probabilities(
    adjacency: &Adjacency,
    similarity: &HeterogeneityMatrix,
    ratio: f64,
) -> Vec<((usize, usize), f64)> {
    let n = adjacency.num_nodes();
    let budget = ratio * adjacency.num_edges() as f64;
    let mut pairs = Vec::new();
    let mut total_sim = 0.0;
    for m in 0..n {
        for r in (m + 1)..n {
            if !adjacency.is_edge(m, r) {
                let s = similarity.unit_at(m, r);
                total_sim += s;
                pairs.push(((m, r), s));
            }
        }
    }
    if total_sim <= 0.0 {
        return Vec::new();
    }
    pairs
        .into_iter()
        .map(|(p, s)| (p, (budget * s / total_sim).clamp(0.0, PROB_CAP)))
        .collect()
}

/// Similarity-adaptive rewiring: weakly-dependent existing edges are removed
/// and strongly-dependent non-adjacent pairs connected; both phases budget an
/// expected `ratio·|E|` changes.
pub fn topology_rewire(
    adjacency: &Adjacency,
    similarity: &HeterogeneityMatrix,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Adjacency {
    assert!((0.0..=1.0).contains(&ratio));
    if ratio == 0.0 {
        return adjacency.clone();
    }
    let edges = adjacency.edges();
    let removal = removal_probabilities(adjacency, similarity, ratio);
    let mut kept: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
    for (edge, p) in edges.iter().zip(&removal) {
        if !(rng.gen::<f64>() < *p) {
            kept.push(*edge);
        }
    }
    for (pair, p) in addition_probabilities(adjacency, similarity, ratio) {
        if rng.gen::<f64>() < p {
            kept.push(pair);
        }
    }
    Adjacency::from_edges(adjacency.num_nodes(), &kept)
}

/// Uniform random rewiring at the same expected budgets (ablation variant).
pub fn uniform_rewire(adjacency: &Adjacency, ratio: f64, rng: &mut ChaCha8Rng) -> Adjacency {
    assert!((0.0..=1.0).contains(&ratio));
    if ratio == 0.0 {
        return adjacency.clone();
    }
    let n = adjacency.num_nodes();
    let edges = adjacency.edges();
    let p_remove = ratio.min(PROB_CAP);
    let mut kept: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
    for edge in &edges {
        if !(rng.gen::<f64>() < p_remove) {
            kept.push(*edge);
        }
    }
    let num_nonadj = n * (n - 1) / 2 - edges.len();
    if num_nonadj > 0 {
        let p_add = (ratio * edges.len() as f64 / num_nonadj as f64).clamp(0.0, PROB_CAP);
        for m in 0..n {
            for r in (m + 1)..n {
                if !adjacency.is_edge(m, r) && rng.gen::<f64>() < p_add {
                    kept.push((m, r));
                }
            }
        }
    }
    Adjacency::from_edges(n, &kept)
}
