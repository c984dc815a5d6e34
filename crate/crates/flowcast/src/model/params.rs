//! Parameter initialization and per-tape registration handles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::autodiff::{ParamStore, Tape, Tensor, VarId};

/// Widths the parameter set depends on.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub encoder: EncoderConfig,
    /// Number of cluster prototypes K.
    pub clusters: usize,
}

fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// Build the full parameter set with a deterministic seeded initialization.
///
/// Kernels and weight matrices are Glorot-uniform, biases zero, the two
/// fusion gates start at 0.5 so the fused view begins as the average.
pub fn init_params(dims: &ModelDims, rng: &mut ChaCha8Rng) -> ParamStore {
    let d = dims.encoder.dim;
    let k = dims.encoder.kernel_size;
    let mut store = ParamStore::new();
    let put = |store: &mut ParamStore, name: String, t: Tensor| {
        store.insert(&name, t).expect("unique param names");
    };

    put(
        &mut store,
        "input_proj.weight".into(),
        glorot(vec![2, d], 2, d, rng),
    );
    put(&mut store, "input_proj.bias".into(), Tensor::zeros(vec![d]));

    for layer in 0..dims.encoder.num_tc_layers() {
        for branch in ["value", "gate"] {
            put(
                &mut store,
                format!("tc{layer}.{branch}.kernel"),
                glorot(vec![k, d, d], k * d, d, rng),
            );
            put(
                &mut store,
                format!("tc{layer}.{branch}.bias"),
                Tensor::zeros(vec![d]),
            );
        }
    }
    for layer in 0..dims.encoder.num_sc_layers() {
        put(
            &mut store,
            format!("sc{layer}.weight"),
            glorot(vec![d, d], d, d, rng),
        );
        put(&mut store, format!("sc{layer}.bias"), Tensor::zeros(vec![d]));
    }

    let relevance: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    put(
        &mut store,
        "relevance.weight".into(),
        Tensor::new(vec![d], relevance),
    );

    put(
        &mut store,
        "prototypes".into(),
        glorot(vec![dims.clusters, d], d, dims.clusters, rng),
    );

    put(
        &mut store,
        "fusion.original".into(),
        Tensor::filled(vec![d], 0.5),
    );
    put(
        &mut store,
        "fusion.augmented".into(),
        Tensor::filled(vec![d], 0.5),
    );
    put(
        &mut store,
        "discriminator.weight".into(),
        glorot(vec![d, d], d, d, rng),
    );

    put(
        &mut store,
        "head.hidden.weight".into(),
        glorot(vec![d, d], d, d, rng),
    );
    put(&mut store, "head.hidden.bias".into(), Tensor::zeros(vec![d]));
    put(
        &mut store,
        "head.out.weight".into(),
        glorot(vec![d, 2], d, 2, rng),
    );
    put(&mut store, "head.out.bias".into(), Tensor::zeros(vec![2]));

    store
}

/// Tape handles for every parameter of one registration.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub input_proj_weight: VarId,
    pub input_proj_bias: VarId,
    /// (value kernel, value bias, gate kernel, gate bias) per TC layer.
    pub tc: Vec<(VarId, VarId, VarId, VarId)>,
    /// (weight, bias) per SC layer.
    pub sc: Vec<(VarId, VarId)>,
    pub relevance_weight: VarId,
    pub prototypes: VarId,
    pub fusion_original: VarId,
    pub fusion_augmented: VarId,
    pub discriminator_weight: VarId,
    pub head_hidden_weight: VarId,
    pub head_hidden_bias: VarId,
    pub head_out_weight: VarId,
    pub head_out_bias: VarId,
}

impl ModelVars {
    /// Register every parameter on `tape` and resolve the typed handles.
    /// Returns the handles plus the store-ordered id list for gradient
    /// accumulation.
    pub fn register(store: &ParamStore, dims: &ModelDims, tape: &mut Tape) -> (Self, Vec<VarId>) {
        let ids = store.register_all(tape);
        Self::resolve(store, dims, ids)
    }

    /// Register parameters as constants for gradient-free forward passes.
    pub fn register_frozen(
        store: &ParamStore,
        dims: &ModelDims,
        tape: &mut Tape,
    ) -> (Self, Vec<VarId>) {
        let ids = store
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        Self::resolve(store, dims, ids)
    }

    /// Resolve typed handles from an already-registered id list (store
    /// order). The store is only consulted for name positions.
    pub fn from_ids(store: &ParamStore, dims: &ModelDims, ids: Vec<VarId>) -> (Self, Vec<VarId>) {
        Self::resolve(store, dims, ids)
    }

    fn resolve(store: &ParamStore, dims: &ModelDims, ids: Vec<VarId>) -> (Self, Vec<VarId>) {
        let at = |name: &str| ids[store.position(name).expect("param present")];
        let tc = (0..dims.encoder.num_tc_layers())
            .map(|l| {
                (
                    at(&format!("tc{l}.value.kernel")),
                    at(&format!("tc{l}.value.bias")),
                    at(&format!("tc{l}.gate.kernel")),
                    at(&format!("tc{l}.gate.bias")),
                )
            })
            .collect();
        let sc = (0..dims.encoder.num_sc_layers())
            .map(|l| (at(&format!("sc{l}.weight")), at(&format!("sc{l}.bias"))))
            .collect();
        let vars = ModelVars {
            input_proj_weight: at("input_proj.weight"),
            input_proj_bias: at("input_proj.bias"),
            tc,
            sc,
            relevance_weight: at("relevance.weight"),
            prototypes: at("prototypes"),
            fusion_original: at("fusion.original"),
            fusion_augmented: at("fusion.augmented"),
            discriminator_weight: at("discriminator.weight"),
            head_hidden_weight: at("head.hidden.weight"),
            head_hidden_bias: at("head.hidden.bias"),
            head_out_weight: at("head.out.weight"),
            head_out_bias: at("head.out.bias"),
        };
        (vars, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn init_is_seed_deterministic() {
        let dims = ModelDims {
            encoder: EncoderConfig {
                dim: 8,
                kernel_size: 3,
                num_blocks: 1,
            },
            clusters: 3,
        };
        let a = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(4));
        let b = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(4));
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(a.get("prototypes").unwrap().shape(), &[3, 8]);
        assert_eq!(a.get("tc2.gate.kernel").unwrap().shape(), &[3, 8, 8]);
    }
}
