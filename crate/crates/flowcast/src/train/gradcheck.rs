//! Finite-difference validation of the full joint loss on a mini instance.
//!
//! The augmentation draws and the balanced assignments are frozen at the
//! base point, so the differentiated function is exactly the one the
//! training step sees: losses as a function of parameters with the
//! projection treated as a constant.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::trainer::{batch_forward, draw_augmentation, AugmentationSource, FrozenAugmentation};
use super::{RunConfig, TrainError};
use crate::autodiff::{finite_difference_check, FdReport, ParamStore, Tape, Tensor, VarId};
use crate::data::{
    build_grid_adjacency, make_windows, synth_generate, Adjacency, Scaler, SynthSpec,
    TrafficFlowGraph,
};
use crate::model::{st_encode, ModelVars};
use crate::ssl::spatial::{cluster_scores, sinkhorn_project};

/// A frozen two-sample batch with everything the joint loss needs.
pub struct JointLossInstance {
    pub config: RunConfig,
    pub adjacency: Adjacency,
    /// Normalized input windows.
    pub windows: Vec<Tensor>,
    /// Normalized targets.
    pub targets: Vec<Tensor>,
    pub(crate) frozen: Vec<FrozenAugmentation>,
}

fn mini_config(seed: u64) -> RunConfig {
    RunConfig {
        embedding_dim: 8,
        clusters: 3,
        steps_per_day: Some(8),
        batch_size: 2,
        seed,
        ..RunConfig::default()
    }
}

/// Build the N=6, T=7, D=8, K=3, batch-2 instance with frozen draws.
pub fn build_joint_loss_instance(seed: u64) -> Result<(ParamStore, JointLossInstance), TrainError> {
    let config = mini_config(seed);
    let spec = SynthSpec {
        rows: 2,
        cols: 3,
        num_steps: 60,
        interval_minutes: 180, // 8 steps per day
        regimes: 2,
        noise_level: 0.5,
    };
    let (dataset, _) = synth_generate(&spec, seed)?;
    let samples = make_windows(
        &dataset,
        config.recent_steps,
        config.daily_steps,
        config.steps_per_day.unwrap(),
    );
    let picked = [&samples[0], &samples[7]];
    let scaler = Scaler::fit(&samples[..16])?;
    let adjacency = build_grid_adjacency(spec.rows, spec.cols, config.neighborhood);
    let dims = config.model_dims();
    let store = crate::model::init_params(&dims, &mut ChaCha8Rng::seed_from_u64(seed));

    let windows: Vec<Tensor> = picked.iter().map(|s| scaler.transform(&s.input)).collect();
    let targets: Vec<Tensor> = picked.iter().map(|s| scaler.transform(&s.target)).collect();

    // Freeze the augmentation: one forward pass at the base parameters per
    // sample, then fix the drawn masks/edges and the projected assignment.
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed);
    aug_rng.set_stream(1);
    let mut frozen = Vec::with_capacity(windows.len());
    for window in &windows {
        let mut tape = Tape::new();
        let (vars, _) = ModelVars::register_frozen(&store, &dims, &mut tape);
        let graph = TrafficFlowGraph::new(adjacency.clone(), window.clone());
        let encoded = st_encode(&mut tape, &vars, &graph, &config.encoder_config())?;
        let first_tc = tape.value(encoded.first_tc).clone();
        let relevance_weight = tape.value(vars.relevance_weight).data().to_vec();
        let (masked, rewired, _, _) = draw_augmentation(
            &config,
            &first_tc,
            &relevance_weight,
            window,
            &adjacency,
            &mut aug_rng,
        );
        let aug_graph = TrafficFlowGraph::new(rewired.clone(), masked.clone());
        let encoded_aug = st_encode(&mut tape, &vars, &aug_graph, &config.encoder_config())?;
        let logits_aug = cluster_scores(&mut tape, encoded_aug.embedding, vars.prototypes);
        let outcome = sinkhorn_project(
            tape.value(logits_aug).data(),
            adjacency.num_nodes(),
            config.clusters,
            config.assignment_smoothing,
            config.sinkhorn_max_iters,
            config.sinkhorn_tol,
        );
        frozen.push(FrozenAugmentation {
            window: masked,
            adjacency: rewired,
            assignment: outcome.assignment,
        });
    }

    Ok((
        store,
        JointLossInstance {
            config,
            adjacency,
            windows,
            targets,
            frozen,
        },
    ))
}

/// Assemble the batch joint loss for registered parameter ids.
pub fn joint_loss_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &[VarId],
    instance: &JointLossInstance,
) -> Result<VarId, TrainError> {
    let dims = instance.config.model_dims();
    let (vars, _) = ModelVars::from_ids(store, &dims, ids.to_vec());
    let mut source = AugmentationSource::Frozen(&instance.frozen);
    let losses = batch_forward(
        tape,
        &vars,
        &instance.config,
        &instance.adjacency,
        &instance.windows,
        &instance.targets,
        &mut source,
    )?;
    Ok(losses.joint)
}

/// Central finite differences of the full joint loss against the tape
/// gradient; returns the report with the max relative error.
pub fn run_joint_gradcheck(seed: u64, eps: f64) -> Result<FdReport, TrainError> {
    let (mut store, instance) = build_joint_loss_instance(seed)?;
    let lookup = store.clone();
    let report = finite_difference_check(&mut store, eps, |tape, ids| {
        joint_loss_on_tape(tape, &lookup, ids, &instance).expect("frozen instance is valid")
    })?;
    Ok(report)
}
