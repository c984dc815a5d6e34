//! Forward passes of the encoder stack and the prediction head.

use super::{EncoderConfig, ModelError, ModelVars};
use crate::autodiff::{Tape, Tensor, VarId};
use crate::data::{Adjacency, TrafficFlowGraph};

/// Symmetric degree normalization with self-loops:
/// `Â = Deg^{-1/2} (A + I) Deg^{-1/2}` where `Deg` is the degree of `A + I`.
/// An isolated node keeps a unit self-loop.
pub fn normalize_adjacency(adjacency: &Adjacency) -> Tensor {
    let n = adjacency.num_nodes();
    let a = adjacency.dense();
    let mut with_loops = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            with_loops[i * n + j] = a[i * n + j];
        }
        with_loops[i * n + i] += 1.0;
    }
    let deg_inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = with_loops[i * n..(i + 1) * n].iter().sum();
            1.0 / d.sqrt()
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            with_loops[i * n + j] *= deg_inv_sqrt[i] * deg_inv_sqrt[j];
        }
    }
    Tensor::new(vec![n, n], with_loops)
}

/// Gated temporal convolution: `out = (X*K_v + b_v) ⊙ σ(X*K_g + b_g)` with
/// valid (unpadded) convolutions over the leading time axis, so the output
/// at position τ sees only input steps τ..τ+k-1.
pub fn gated_causal_conv(
    tape: &mut Tape,
    input: VarId,
    value_kernel: VarId,
    value_bias: VarId,
    gate_kernel: VarId,
    gate_bias: VarId,
) -> Result<VarId, ModelError> {
    let t = tape.shape(input)[0];
    let k = tape.shape(value_kernel)[0];
    if t < k {
        return Err(ModelError::Shape(format!(
            "temporal convolution needs T >= k, got T={t}, k={k}"
        )));
    }
    let value = tape.conv1d(input, value_kernel);
    let value = tape.add(value, value_bias);
    let gate = tape.conv1d(input, gate_kernel);
    let gate = tape.add(gate, gate_bias);
    let gate = tape.sigmoid(gate);
    Ok(tape.mul(value, gate))
}

/// Graph convolution on one time slice: `ReLU(Â · X · W + b)`.
pub fn graph_conv(
    tape: &mut Tape,
    x: VarId,
    norm_adj: VarId,
    weight: VarId,
    bias: VarId,
) -> Result<VarId, ModelError> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(ModelError::Shape(format!(
            "graph_conv expects [N,D]x[D,D'], got {xs:?} x {ws:?}"
        )));
    }
    if tape.shape(norm_adj) != [xs[0], xs[0]] {
        return Err(ModelError::Shape(format!(
            "normalized adjacency is {:?}, need [{}, {}]",
            tape.shape(norm_adj),
            xs[0],
            xs[0]
        )));
    }
    let mixed = tape.matmul(norm_adj, x);
    let lifted = tape.matmul(mixed, weight);
    let shifted = tape.add(lifted, bias);
    Ok(tape.relu(shifted))
}

/// Apply a graph convolution identically at every time slice of `[T', N, D]`.
fn graph_conv_sequence(
    tape: &mut Tape,
    seq: VarId,
    norm_adj: VarId,
    weight: VarId,
    bias: VarId,
) -> Result<VarId, ModelError> {
    let shape = tape.shape(seq).to_vec();
    let (t_len, n, d) = (shape[0], shape[1], shape[2]);
    let mut slices = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let slice = tape.slice_axis(seq, 0, t, 1);
        let flat = tape.reshape(slice, vec![n, d]);
        let conv = graph_conv(tape, flat, norm_adj, weight, bias)?;
        slices.push(tape.reshape(conv, vec![1, n, d]));
    }
    Ok(tape.concat(0, &slices))
}

/// Outputs of the encoder stack.
pub struct Encoded {
    /// `[T₁, N, D]` output of the first temporal convolution, the basis for
    /// heterogeneity measurement.
    pub first_tc: VarId,
    /// `[N, D]` final region embedding matrix.
    pub embedding: VarId,
}

/// Full encoder: input projection, `num_blocks` TC→SC→TC blocks, a closing
/// temporal convolution, and the squeeze of the collapsed time axis.
pub fn st_encode(
    tape: &mut Tape,
    vars: &ModelVars,
    graph: &TrafficFlowGraph,
    config: &EncoderConfig,
) -> Result<Encoded, ModelError> {
    let t_len = graph.window.shape()[0];
    config.validate(t_len)?;
    let n = graph.window.shape()[1];
    let d = config.dim;

    let window = tape.constant(graph.window.clone());
    let norm_adj = tape.constant(normalize_adjacency(&graph.adjacency));

    // Channel lift 2 → D.
    let flat = tape.reshape(window, vec![t_len * n, 2]);
    let lifted = tape.matmul(flat, vars.input_proj_weight);
    let lifted = tape.add(lifted, vars.input_proj_bias);
    let mut seq = tape.reshape(lifted, vec![t_len, n, d]);

    let mut first_tc = None;
    let mut tc_iter = vars.tc.iter();
    let mut next_tc = |tape: &mut Tape, seq: VarId| -> Result<VarId, ModelError> {
        let &(vk, vb, gk, gb) = tc_iter.next().expect("layer count fixed by config");
        gated_causal_conv(tape, seq, vk, vb, gk, gb)
    };

    for block in 0..config.num_blocks {
        seq = next_tc(tape, seq)?;
        if block == 0 {
            first_tc = Some(seq);
        }
        let (w, b) = vars.sc[block];
        seq = graph_conv_sequence(tape, seq, norm_adj, w, b)?;
        seq = next_tc(tape, seq)?;
    }
    seq = next_tc(tape, seq)?;

    debug_assert_eq!(tape.shape(seq)[0], 1);
    let embedding = tape.reshape(seq, vec![n, d]);
    Ok(Encoded {
        first_tc: first_tc.expect("at least one block"),
        embedding,
    })
}

/// Two-layer perceptron head, applied per region: `[N, D] → [N, 2]`.
pub fn mlp_predict(tape: &mut Tape, embedding: VarId, vars: &ModelVars) -> VarId {
    let hidden = tape.matmul(embedding, vars.head_hidden_weight);
    let hidden = tape.add(hidden, vars.head_hidden_bias);
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, vars.head_out_weight);
    tape.add(out, vars.head_out_bias)
}
