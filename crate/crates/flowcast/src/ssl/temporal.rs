//! Cross-time contrastive objective: a bilinear critic scores region
//! embeddings against their own time step's city summary (positives) and
//! against another step's regions (negatives).

use crate::autodiff::{Tape, Tensor, VarId};

/// Gated fusion of the original and augmented region embeddings:
/// `V = w₁ ⊙ H + w₂ ⊙ H̃`, elementwise per region.
pub fn fuse_views(
    tape: &mut Tape,
    original: VarId,
    augmented: VarId,
    gate_original: VarId,
    gate_augmented: VarId,
) -> VarId {
    assert_eq!(tape.shape(original), tape.shape(augmented));
    let a = tape.mul(original, gate_original);
    let b = tape.mul(augmented, gate_augmented);
    tape.add(a, b)
}

/// City-level readout: sigmoid of the region mean, `[N, D] → [D]`.
pub fn city_summary(tape: &mut Tape, fused: VarId) -> VarId {
    let mean = tape.mean_axis(fused, 0);
    tape.sigmoid(mean)
}

/// Critic score for a single (region, summary) pair: `σ(vᵀ W s)`.
pub fn discriminate(tape: &mut Tape, region: VarId, summary: VarId, weight: VarId) -> VarId {
    let d = tape.shape(region)[0];
    let v_row = tape.reshape(region, vec![1, d]);
    let s_col = tape.reshape(summary, vec![d, 1]);
    let vw = tape.matmul(v_row, weight);
    let score = tape.matmul(vw, s_col);
    let flat = tape.reshape(score, vec![1]);
    tape.sigmoid(flat)
}

/// Critic logits for all regions at once: `[N, D] × [D, D] × [D, 1] → [N, 1]`.
fn pair_logits(tape: &mut Tape, regions: VarId, summary: VarId, weight: VarId) -> VarId {
    let d = tape.shape(summary)[0];
    let vw = tape.matmul(regions, weight);
    let s_col = tape.reshape(summary, vec![d, 1]);
    tape.matmul(vw, s_col)
}

/// Binary cross-entropy over one (positive step, negative step) pair:
/// `−Σ_n [ log g(v_n, s) + log(1 − g(v'_n, s)) ]`, scores clamped away from
/// {0, 1} by 1e-12 before the log.
pub fn temporal_loss(
    tape: &mut Tape,
    regions_positive: VarId,
    regions_negative: VarId,
    summary: VarId,
    weight: VarId,
) -> VarId {
    assert_eq!(tape.shape(regions_positive), tape.shape(regions_negative));
    let n = tape.shape(regions_positive)[0];

    let pos_scores = {
        let logits = pair_logits(tape, regions_positive, summary, weight);
        tape.sigmoid(logits)
    };
    let pos_clamped = tape.clamp_min(pos_scores, 1e-12);
    let pos_log = tape.ln(pos_clamped);

    let neg_scores = {
        let logits = pair_logits(tape, regions_negative, summary, weight);
        tape.sigmoid(logits)
    };
    let ones = tape.constant(Tensor::filled(vec![n, 1], 1.0));
    let neg_complement = tape.sub(ones, neg_scores);
    let neg_clamped = tape.clamp_min(neg_complement, 1e-12);
    let neg_log = tape.ln(neg_clamped);

    let total = {
        let s = tape.add(pos_log, neg_log);
        tape.sum_all(s)
    };
    tape.neg(total)
}
