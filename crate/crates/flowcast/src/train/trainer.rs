//! The four-stage training loop and the shared forward machinery.
//!
//! One batch step: (i) encode each sample's observed graph, (ii) draw the
//! adaptive augmentation from the first-layer embeddings and encode the
//! augmented graph through the same parameters, (iii) assemble the
//! prediction, clustering, and contrastive losses, (iv) back-propagate and
//! apply one optimizer step.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, Metrics, RunConfig, TrainError};
use crate::augment::{
    heterogeneity, region_relevance, region_summary, topology_rewire, traffic_mask, uniform_mask,
    uniform_rewire, HeterogeneityMatrix, RelevanceWeights,
};
use crate::autodiff::{AdamState, ParamStore, Tape, Tensor, VarId};
use crate::data::{
    build_grid_adjacency, make_windows, split_chronological, Adjacency, FlowDataset, Sample,
    Scaler, TrafficFlowGraph,
};
use crate::model::{mlp_predict, st_encode, ModelVars};
use crate::ssl::spatial::{cluster_scores, sinkhorn_project, spatial_loss, AssignmentMatrix, SinkhornOutcome};
use crate::ssl::temporal::{city_summary, fuse_views, temporal_loss};

/// λ-weighted sum of absolute inflow/outflow errors over regions, in the
/// normalized space.
pub fn prediction_loss(
    tape: &mut Tape,
    predicted: VarId,
    target: VarId,
    flow_balance: f64,
) -> VarId {
    assert!((0.0..=1.0).contains(&flow_balance));
    let diff = tape.sub(predicted, target);
    let abs = tape.abs(diff);
    let weights = tape.constant(Tensor::new(vec![2], vec![flow_balance, 1.0 - flow_balance]));
    let weighted = tape.mul(abs, weights);
    tape.sum_all(weighted)
}

/// Per-sample augmentation inputs fixed ahead of the forward pass; the
/// gradient check freezes these, training draws them fresh per batch.
#[derive(Debug, Clone)]
pub(crate) struct FrozenAugmentation {
    pub window: Tensor,
    pub adjacency: Adjacency,
    pub assignment: AssignmentMatrix,
}

pub(crate) enum AugmentationSource<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Frozen(&'a [FrozenAugmentation]),
}

/// Scalar loss values of one batch, with the joint loss still on the tape.
pub(crate) struct BatchLosses {
    pub joint: VarId,
    pub l_p: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_joint: f64,
    pub sinkhorn_failures: usize,
}

/// Draw one sample's augmented view from the measured heterogeneity.
pub(crate) fn draw_augmentation(
    config: &RunConfig,
    first_tc: &Tensor,
    relevance_weight: &[f64],
    window: &Tensor,
    adjacency: &Adjacency,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Adjacency, RelevanceWeights, HeterogeneityMatrix) {
    let relevance = region_relevance(first_tc, relevance_weight);
    let summary = region_summary(first_tc, &relevance);
    let similarity = heterogeneity(&summary);
    let ratio = config.perturbation_ratio;
    let masked = if config.adaptive_traffic_augmentation {
        traffic_mask(window, &relevance, ratio, rng)
    } else {
        uniform_mask(window, ratio, rng)
    };
    let rewired = if config.adaptive_topology_augmentation {
        topology_rewire(adjacency, &similarity, ratio, rng)
    } else {
        uniform_rewire(adjacency, ratio, rng)
    };
    (masked, rewired, relevance, similarity)
}

/// Run the four stages over one batch of normalized windows/targets and
/// return the joint loss node plus logged values.
pub(crate) fn batch_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &RunConfig,
    adjacency: &Adjacency,
    windows: &[Tensor],
    targets: &[Tensor],
    augmentation: &mut AugmentationSource,
) -> Result<BatchLosses, TrainError> {
    let batch = windows.len();
    assert_eq!(batch, targets.len());
    assert!(batch > 0);
    let enc_cfg = config.encoder_config();

    let mut pred_losses = Vec::with_capacity(batch);
    let mut spatial_losses = Vec::with_capacity(batch);
    let mut fused = Vec::with_capacity(batch);
    let mut summaries = Vec::with_capacity(batch);
    let mut sinkhorn_failures = 0usize;

    for (i, (window, target)) in windows.iter().zip(targets).enumerate() {
        // stage i: encode the observed traffic flow graph
        let graph = TrafficFlowGraph::new(adjacency.clone(), window.clone());
        let encoded = st_encode(tape, vars, &graph, &enc_cfg)?;
        let predicted = mlp_predict(tape, encoded.embedding, vars);
        let target_var = tape.constant(target.clone());
        pred_losses.push(prediction_loss(tape, predicted, target_var, config.flow_balance));

        // stage ii: augment and re-encode through the shared parameters
        let (aug_window, aug_adjacency, frozen_assignment) = match augmentation {
            AugmentationSource::Fresh(rng) => {
                let first_tc = tape.value(encoded.first_tc).clone();
                let relevance_weight = tape.value(vars.relevance_weight).data().to_vec();
                let (masked, rewired, _, _) =
                    draw_augmentation(config, &first_tc, &relevance_weight, window, adjacency, rng);
                (masked, rewired, None)
            }
            AugmentationSource::Frozen(frozen) => {
                let f = &frozen[i];
                (f.window.clone(), f.adjacency.clone(), Some(f.assignment.clone()))
            }
        };
        let aug_graph = TrafficFlowGraph::new(aug_adjacency, aug_window);
        let encoded_aug = st_encode(tape, vars, &aug_graph, &enc_cfg)?;

        // stage iii: losses
        if config.use_spatial_loss {
            let logits_original = cluster_scores(tape, encoded.embedding, vars.prototypes);
            let assignment = match frozen_assignment {
                Some(a) => a,
                None => {
                    let logits_aug = cluster_scores(tape, encoded_aug.embedding, vars.prototypes);
                    let outcome = sinkhorn_project(
                        tape.value(logits_aug).data(),
                        adjacency.num_nodes(),
                        config.clusters,
                        config.assignment_smoothing,
                        config.sinkhorn_max_iters,
                        config.sinkhorn_tol,
                    );
                    if !outcome.converged {
                        sinkhorn_failures += 1;
                    }
                    outcome.assignment
                }
            };
            spatial_losses.push(spatial_loss(
                tape,
                logits_original,
                &assignment,
                config.temperature,
            ));
        }
        if config.use_temporal_loss {
            let v = fuse_views(
                tape,
                encoded.embedding,
                encoded_aug.embedding,
                vars.fusion_original,
                vars.fusion_augmented,
            );
            summaries.push(city_summary(tape, v));
            fused.push(v);
        }
    }

    let mean_of = |tape: &mut Tape, parts: &[VarId]| -> VarId {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p);
        }
        tape.scale(acc, 1.0 / parts.len() as f64)
    };

    let l_p = mean_of(tape, &pred_losses);
    let mut joint = l_p;

    let l_s = if config.use_spatial_loss {
        let l = mean_of(tape, &spatial_losses);
        joint = tape.add(joint, l);
        Some(l)
    } else {
        None
    };

    // stage iii (continued): negatives pair each sample with the next one in
    // the batch (cyclic); a singleton batch has no valid pair and skips the
    // contrastive term.
    let l_t = if config.use_temporal_loss && batch >= 2 {
        let mut parts = Vec::with_capacity(batch);
        for i in 0..batch {
            let next = (i + 1) % batch;
            parts.push(temporal_loss(
                tape,
                fused[i],
                fused[next],
                summaries[i],
                vars.discriminator_weight,
            ));
        }
        let l = mean_of(tape, &parts);
        joint = tape.add(joint, l);
        Some(l)
    } else {
        None
    };

    Ok(BatchLosses {
        joint,
        l_p: tape.value(l_p).data()[0],
        l_s: l_s.map(|v| tape.value(v).data()[0]).unwrap_or(0.0),
        l_t: l_t.map(|v| tape.value(v).data()[0]).unwrap_or(0.0),
        l_joint: tape.value(joint).data()[0],
        sinkhorn_failures,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_p: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_joint: f64,
    pub val_mae_in: f64,
    pub val_mae_out: f64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Sinkhorn projections that hit the iteration cap, over the whole run.
    pub sinkhorn_failures: usize,
}

/// Train on `dataset` under `config`; deterministic per seed.
pub fn train(config: &RunConfig, dataset: &FlowDataset) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let steps_per_day = config.steps_per_day.unwrap_or_else(|| dataset.steps_per_day());
    let samples = make_windows(
        dataset,
        config.recent_steps,
        config.daily_steps,
        steps_per_day,
    );
    let split = split_chronological(samples.len());
    if split.train.is_empty() {
        return Err(TrainError::Config(format!(
            "no training samples: dataset yields {} windows",
            samples.len()
        )));
    }
    let scaler = Scaler::fit(&samples[split.train.clone()])?;
    let adjacency = build_grid_adjacency(dataset.rows, dataset.cols, config.neighborhood);
    let dims = config.model_dims();

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = crate::model::init_params(&dims, &mut init_rng);
    let mut adam = AdamState::new(
        &store,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.eps_hat,
    );
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(1);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(2);

    let val_samples = &samples[split.val.clone()];
    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut epochs_since_best = 0usize;
    let mut sinkhorn_failures = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = split.train.clone().collect();
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let windows: Vec<Tensor> = chunk
                .iter()
                .map(|&i| scaler.transform(&samples[i].input))
                .collect();
            let targets: Vec<Tensor> = chunk
                .iter()
                .map(|&i| scaler.transform(&samples[i].target))
                .collect();

            let mut tape = Tape::new();
            let (vars, ids) = ModelVars::register(&store, &dims, &mut tape);
            let mut source = AugmentationSource::Fresh(&mut aug_rng);
            let losses = batch_forward(
                &mut tape,
                &vars,
                config,
                &adjacency,
                &windows,
                &targets,
                &mut source,
            )?;
            sinkhorn_failures += losses.sinkhorn_failures;

            // stage iv: back-propagation and one optimizer step
            let grads = tape.backward(losses.joint)?;
            store.zero_grads();
            store.accumulate_grads(&ids, &grads)?;
            adam.step(&mut store)?;

            let w = chunk.len() as f64;
            sums.0 += losses.l_p * w;
            sums.1 += losses.l_s * w;
            sums.2 += losses.l_t * w;
            sums.3 += losses.l_joint * w;
            seen += chunk.len();
        }

        let val_metrics = evaluate_with(&store, config, &adjacency, &scaler, val_samples)?;
        let n = seen as f64;
        history.push(EpochStats {
            epoch,
            l_p: sums.0 / n,
            l_s: sums.1 / n,
            l_t: sums.2 / n,
            l_joint: sums.3 / n,
            val_mae_in: val_metrics.mae_in,
            val_mae_out: val_metrics.mae_out,
        });

        let val_score = 0.5 * (val_metrics.mae_in + val_metrics.mae_out);
        if val_score < best_val {
            best_val = val_score;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                log::info!("early stop at epoch {epoch}: no improvement for {epochs_since_best} epochs");
                break;
            }
        }
    }
    if sinkhorn_failures > 0 {
        log::warn!("{sinkhorn_failures} assignment projections hit the iteration cap");
    }

    let mut resolved = config.clone();
    resolved.steps_per_day = Some(steps_per_day);
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: resolved,
            scaler,
            store,
        },
        history,
        sinkhorn_failures,
    })
}

/// Forward passes over samples with frozen parameters; metrics on
/// de-normalized predictions against raw targets.
fn evaluate_with(
    store: &ParamStore,
    config: &RunConfig,
    adjacency: &Adjacency,
    scaler: &Scaler,
    samples: &[Sample],
) -> Result<Metrics, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("evaluation needs at least one sample".into()));
    }
    let dims = config.model_dims();
    let enc_cfg = config.encoder_config();
    let mut acc = super::metrics::MetricsAccumulator::new();
    for sample in samples {
        let mut tape = Tape::new();
        let (vars, _) = ModelVars::register_frozen(store, &dims, &mut tape);
        let window = scaler.transform(&sample.input);
        let graph = TrafficFlowGraph::new(adjacency.clone(), window);
        let encoded = st_encode(&mut tape, &vars, &graph, &enc_cfg)?;
        let predicted = mlp_predict(&mut tape, encoded.embedding, &vars);
        let predicted_raw = scaler.inverse_transform(tape.value(predicted));
        acc.add_matrix(predicted_raw.data(), sample.target.data());
    }
    Ok(acc.finish(samples.len()))
}

/// Evaluate a checkpoint on a sample set.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &FlowDataset, samples: &[Sample]) -> Result<Metrics, TrainError> {
    let adjacency = build_grid_adjacency(dataset.rows, dataset.cols, checkpoint.config.neighborhood);
    evaluate_with(
        &checkpoint.store,
        &checkpoint.config,
        &adjacency,
        &checkpoint.scaler,
        samples,
    )
}

/// Mean prototype scores of the original view over `samples`, projected onto
/// the balanced polytope. The row-wise argmax is the cluster snapshot used
/// for purity evaluation.
pub fn cluster_snapshot(
    checkpoint: &Checkpoint,
    dataset: &FlowDataset,
    samples: &[Sample],
) -> Result<SinkhornOutcome, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("snapshot needs at least one sample".into()));
    }
    let config = &checkpoint.config;
    let dims = config.model_dims();
    let enc_cfg = config.encoder_config();
    let adjacency = build_grid_adjacency(dataset.rows, dataset.cols, config.neighborhood);
    let n = adjacency.num_nodes();
    let mut mean_logits = vec![0.0f64; n * config.clusters];
    for sample in samples {
        let mut tape = Tape::new();
        let (vars, _) = ModelVars::register_frozen(&checkpoint.store, &dims, &mut tape);
        let window = checkpoint.scaler.transform(&sample.input);
        let graph = TrafficFlowGraph::new(adjacency.clone(), window);
        let encoded = st_encode(&mut tape, &vars, &graph, &enc_cfg)?;
        let logits = cluster_scores(&mut tape, encoded.embedding, vars.prototypes);
        for (acc, v) in mean_logits.iter_mut().zip(tape.value(logits).data()) {
            *acc += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    mean_logits.iter_mut().for_each(|v| *v *= inv);
    Ok(sinkhorn_project(
        &mean_logits,
        n,
        config.clusters,
        config.assignment_smoothing,
        config.sinkhorn_max_iters.max(10_000),
        config.sinkhorn_tol,
    ))
}

/// Relevance/similarity diagnostics on one sample: the raw matrices plus
/// the mask/rewire probability grids the augmentation would draw from.
pub struct InspectOutput {
    pub relevance: RelevanceWeights,
    pub similarity: HeterogeneityMatrix,
    /// `[T, N]` mask probabilities over the full window.
    pub mask_probabilities: Vec<f64>,
    /// Removal probability per existing edge, aligned with `edges`.
    pub removal_probabilities: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    /// Addition probability per non-adjacent pair.
    pub addition_probabilities: Vec<((usize, usize), f64)>,
}

pub fn inspect_augmentation(
    checkpoint: &Checkpoint,
    dataset: &FlowDataset,
    sample: &Sample,
) -> Result<InspectOutput, TrainError> {
    let config = &checkpoint.config;
    let dims = config.model_dims();
    let enc_cfg = config.encoder_config();
    let adjacency = build_grid_adjacency(dataset.rows, dataset.cols, config.neighborhood);
    let mut tape = Tape::new();
    let (vars, _) = ModelVars::register_frozen(&checkpoint.store, &dims, &mut tape);
    let window = checkpoint.scaler.transform(&sample.input);
    let graph = TrafficFlowGraph::new(adjacency.clone(), window);
    let encoded = st_encode(&mut tape, &vars, &graph, &enc_cfg)?;
    let first_tc = tape.value(encoded.first_tc).clone();
    let relevance_weight = tape.value(vars.relevance_weight).data().to_vec();
    let relevance = region_relevance(&first_tc, &relevance_weight);
    let summary = region_summary(&first_tc, &relevance);
    let similarity = heterogeneity(&summary);
    let ratio = config.perturbation_ratio;
    Ok(InspectOutput {
        mask_probabilities: crate::augment::mask_probabilities(
            &relevance,
            ratio,
            sample.input.shape()[0],
        ),
        removal_probabilities: crate::augment::removal_probabilities(&adjacency, &similarity, ratio),
        edges: adjacency.edges(),
        addition_probabilities: crate::augment::addition_probabilities(&adjacency, &similarity, ratio),
        relevance,
        similarity,
    })
}

/// history.csv: epoch,l_p,l_s,l_t,l_joint,val_mae_in,val_mae_out
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,l_p,l_s,l_t,l_joint,val_mae_in,val_mae_out\n");
    for row in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.epoch, row.l_p, row.l_s, row.l_t, row.l_joint, row.val_mae_in, row.val_mae_out
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| TrainError::io(path, e))
}

/// assignments.csv: region,cluster,p0..p{K-1}
pub fn write_assignments_csv(path: &Path, assignment: &AssignmentMatrix) -> Result<(), TrainError> {
    let mut out = String::from("region,cluster");
    for c in 0..assignment.k {
        write!(out, ",p{c}").expect("string write");
    }
    out.push('\n');
    let argmax = assignment.argmax_rows();
    for r in 0..assignment.n {
        write!(out, "{},{}", r, argmax[r]).expect("string write");
        for c in 0..assignment.k {
            write!(out, ",{}", assignment.at(r, c)).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| TrainError::io(path, e))
}

/// Deterministic auxiliary rng hook for tests that need fresh draws.
#[allow(dead_code)]
pub(crate) fn test_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _: f64 = rng.gen();
    rng
}
