//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded eagerly on a [`Tape`]; [`Tape::backward`] replays
//! the recording in reverse to accumulate gradients. The tape is rebuilt per
//! training step and never shared across threads.

use std::collections::BTreeMap;

use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Neg(VarId),
    Scale(VarId, f64),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Reshape(VarId),
    Concat(Vec<VarId>, usize),
    Slice {
        src: VarId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Conv1d {
        input: VarId,
        kernel: VarId,
    },
    Sigmoid(VarId),
    Relu(VarId),
    Abs(VarId),
    Exp(VarId),
    Ln(VarId),
    ClampMin(VarId, f64),
    SoftmaxAxis(VarId, usize),
    LogSoftmaxAxis(VarId, usize),
    SumAxis(VarId, usize),
    MeanAxis(VarId, usize),
    SumAll(VarId),
    MeanAll(VarId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv1d { .. } => "conv1d",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftmaxAxis(..) => "softmax",
            Op::LogSoftmaxAxis(..) => "log_softmax",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<VarId>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of `v`, if any was accumulated.
    pub fn of(&self, v: VarId) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient map over the tape's registered parameters; parameters the
    /// loss never touched get a zero gradient of matching shape.
    pub fn param_map(&self, tape: &Tape) -> BTreeMap<VarId, Tensor> {
        let mut map = BTreeMap::new();
        for &p in &tape.params {
            let shape = tape.nodes[p.0].value.shape().to_vec();
            let data = match &self.grads[p.0] {
                Some(g) => g.clone(),
                None => vec![0.0; tape.nodes[p.0].value.numel()],
            };
            map.insert(p, Tensor::new(shape, data));
        }
        map
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// acc[m,n] += A[m,k] · B[n,k]ᵀ
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            acc[i * n + j] += dot;
        }
    }
}

/// acc[k,n] += A[m,k]ᵀ · B[m,n]
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: &mut [f64]) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let api = a[p * k + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut acc[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Apply `f(a_entry, b_entry)` with `b` broadcast against `a`'s full shape.
fn broadcast_zip(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    // Fast paths: identical shapes, or one operand is a suffix of the other.
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect();
    }
    if a_shape == out_shape && is_suffix(b_shape, out_shape) {
        let bsz = b.len().max(1);
        let mut out = Vec::with_capacity(numel);
        for chunk in a.chunks(bsz) {
            out.extend(chunk.iter().zip(b).map(|(x, y)| f(*x, *y)));
        }
        return out;
    }
    if b_shape == out_shape && is_suffix(a_shape, out_shape) {
        let asz = a.len().max(1);
        let mut out = Vec::with_capacity(numel);
        for chunk in b.chunks(asz) {
            out.extend(a.iter().zip(chunk).map(|(x, y)| f(*x, *y)));
        }
        return out;
    }
    // General strided walk.
    let ndim = out_shape.len();
    let pad = |s: &[usize]| {
        let mut p = vec![1usize; ndim];
        p[ndim - s.len()..].copy_from_slice(s);
        p
    };
    let ap = pad(a_shape);
    let bp = pad(b_shape);
    let astr = strides(&ap);
    let bstr = strides(&bp);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; ndim];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut ai = 0;
        let mut bi = 0;
        for d in 0..ndim {
            if ap[d] != 1 {
                ai += coords[d] * astr[d];
            }
            if bp[d] != 1 {
                bi += coords[d] * bstr[d];
            }
        }
        *o = f(a[ai], b[bi]);
    }
    out
}

/// Sum `grad` (of shape `full`) down to `target` under broadcast semantics.
fn reduce_to_shape(grad: &[f64], full: &[usize], target: &[usize]) -> Vec<f64> {
    if full == target {
        return grad.to_vec();
    }
    let tnum: usize = target.iter().product();
    if is_suffix(target, full) && tnum >= 1 {
        let mut out = vec![0.0; tnum];
        for chunk in grad.chunks(tnum.max(1)) {
            for (o, g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let ndim = full.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - target.len()..].copy_from_slice(target);
    let pstr = strides(&padded);
    let mut out = vec![0.0; tnum];
    let mut coords = vec![0usize; ndim];
    for (flat, g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % full[d];
            rem /= full[d];
        }
        let mut ti = 0;
        for d in 0..ndim {
            if padded[d] != 1 {
                ti += coords[d] * pstr[d];
            }
        }
        out[ti] += g;
    }
    out
}

/// Lane decomposition for axis-wise ops: (outer, len, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// Record a differentiable leaf and register it as a parameter.
    pub fn param(&mut self, value: Tensor) -> VarId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push(id);
        id
    }

    pub fn params(&self) -> &[VarId] {
        &self.params
    }

    // ── elementwise / broadcast ────────────────────────────────────────

    fn binary_broadcast(&mut self, a: VarId, b: VarId, op: Op, f: impl Fn(f64, f64) -> f64) -> VarId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(av.shape(), bv.shape()).unwrap_or_else(|| {
            panic!(
                "{}: incompatible shapes {:?} vs {:?}",
                op.name(),
                av.shape(),
                bv.shape()
            )
        });
        let data = broadcast_zip(av.data(), av.shape(), bv.data(), bv.shape(), &out_shape, f);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(out_shape, data), op, needs)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_broadcast(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_broadcast(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_broadcast(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: VarId, op: Op, f: impl Fn(f64) -> f64) -> VarId {
        let av = &self.nodes[a.0].value;
        let data: Vec<f64> = av.data().iter().map(|x| f(*x)).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), op, needs)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn clamp_min(&mut self, a: VarId, min: f64) -> VarId {
        self.unary(a, Op::ClampMin(a, min), |x| x.max(min))
    }

    // ── linear algebra / shape ─────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims: {:?} vs {:?}", av.shape(), bv.shape());
        let data = mm_nn(av.data(), bv.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], data), Op::Matmul(a, b), needs)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape().len(), 2, "transpose expects rank 2");
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(a), needs)
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let av = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        assert_eq!(numel, av.numel(), "reshape {:?} -> {:?}", av.shape(), shape);
        let data = av.data().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Reshape(a), needs)
    }

    pub fn concat(&mut self, axis: usize, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat shapes differ off-axis");
                }
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = lanes(&out_shape, axis);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let out_axis = out_shape[axis];
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let plen = pv.shape()[axis];
            for o in 0..outer {
                let src = &pv.data()[o * plen * inner..(o + 1) * plen * inner];
                let dst_start = (o * out_axis + offset) * inner;
                data[dst_start..dst_start + plen * inner].copy_from_slice(src);
            }
            offset += plen;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(out_shape, data),
            Op::Concat(parts.to_vec(), axis),
            needs,
        )
    }

    pub fn slice_axis(&mut self, src: VarId, axis: usize, start: usize, len: usize) -> VarId {
        let sv = &self.nodes[src.0].value;
        let shape = sv.shape().to_vec();
        assert!(start + len <= shape[axis], "slice out of range");
        let (outer, axis_len, inner) = lanes(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&sv.data()[src_start..src_start + len * inner]);
        }
        let needs = self.needs(src);
        self.push(
            Tensor::new(out_shape, data),
            Op::Slice {
                src,
                axis,
                start,
                len,
            },
            needs,
        )
    }

    /// Valid 1-D convolution along the leading (time) axis.
    ///
    /// `input` is `[T, M, C_in]`, `kernel` is `[k, C_in, C_out]`; the output
    /// is `[T-k+1, M, C_out]` with `out[t] = Σ_δ input[t+δ] · kernel[δ]`.
    pub fn conv1d(&mut self, input: VarId, kernel: VarId) -> VarId {
        let (iv, kv) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        assert_eq!(iv.shape().len(), 3, "conv1d input must be [T, M, C_in]");
        assert_eq!(kv.shape().len(), 3, "conv1d kernel must be [k, C_in, C_out]");
        let (t, m, c_in) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (k, kc_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        assert_eq!(c_in, kc_in, "conv1d channel mismatch");
        assert!(t >= k, "conv1d needs T >= k (T={t}, k={k})");
        let t_out = t - k + 1;
        let mut data = vec![0.0; t_out * m * c_out];
        let x = iv.data();
        let w = kv.data();
        for tau in 0..t_out {
            for r in 0..m {
                let out_row = &mut data[(tau * m + r) * c_out..(tau * m + r + 1) * c_out];
                for delta in 0..k {
                    let in_row = &x[((tau + delta) * m + r) * c_in..((tau + delta) * m + r + 1) * c_in];
                    for (ci, &xv) in in_row.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let w_row = &w[(delta * c_in + ci) * c_out..(delta * c_in + ci + 1) * c_out];
                        for (ov, wv) in out_row.iter_mut().zip(w_row) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        self.push(
            Tensor::new(vec![t_out, m, c_out], data),
            Op::Conv1d { input, kernel },
            needs,
        )
    }

    // ── axis ops ───────────────────────────────────────────────────────

    fn lane_op(
        &mut self,
        a: VarId,
        axis: usize,
        op: Op,
        f: impl Fn(&[f64], usize, &mut [f64]),
    ) -> VarId {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = lanes(&shape, axis);
        let mut data = vec![0.0; av.numel()];
        let src = av.data();
        let mut lane = vec![0.0; len];
        let mut out_lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    lane[j] = src[base + j * inner];
                }
                f(&lane, len, &mut out_lane);
                for j in 0..len {
                    data[base + j * inner] = out_lane[j];
                }
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), op, needs)
    }

    pub fn softmax_axis(&mut self, a: VarId, axis: usize) -> VarId {
        self.lane_op(a, axis, Op::SoftmaxAxis(a, axis), |lane, _, out| {
            softmax_lane(lane, out);
        })
    }

    pub fn log_softmax_axis(&mut self, a: VarId, axis: usize) -> VarId {
        self.lane_op(a, axis, Op::LogSoftmaxAxis(a, axis), |lane, _, out| {
            let mx = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = lane.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for (o, v) in out.iter_mut().zip(lane) {
                *o = v - lse;
            }
        })
    }

    fn reduce_axis(&mut self, a: VarId, axis: usize, op: Op, mean: bool) -> VarId {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = lanes(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        let src = av.data();
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let needs = self.needs(a);
        self.push(Tensor::new(out_shape, data), op, needs)
    }

    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> VarId {
        self.reduce_axis(a, axis, Op::SumAxis(a, axis), false)
    }

    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> VarId {
        self.reduce_axis(a, axis, Op::MeanAxis(a, axis), true)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let av = &self.nodes[a.0].value;
        let s: f64 = av.data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let av = &self.nodes[a.0].value;
        let s: f64 = av.data().iter().sum::<f64>() / av.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), needs)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively;
    /// parameters unreachable from the loss get zero gradients in the map.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, DiffError> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        for node in &self.nodes {
            if !node.value.all_finite() {
                return Err(DiffError::NonFinite {
                    op: node.op.name(),
                    phase: "forward",
                });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
            for id in (0..=loss.0).rev() {
                if grads[id].is_none() || !self.nodes[id].needs_grad {
                    continue;
                }
                let dy = grads[id].take().unwrap();
                self.propagate(id, &dy, &mut grads);
                grads[id] = Some(dy);
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(DiffError::NonFinite {
                        op: self.nodes[id].op.name(),
                        phase: "backward",
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(
        &self,
        grads: &'a mut Vec<Option<Vec<f64>>>,
        v: VarId,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]),
        )
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let out_shape = self.nodes[id].value.shape().to_vec();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(v, _sign) in &[(*a, 1.0), (*b, 1.0)] {
                    let vshape = self.nodes[v.0].value.shape().to_vec();
                    if let Some(g) = self.acc(grads, v) {
                        let red = reduce_to_shape(dy, &out_shape, &vshape);
                        for (gv, rv) in g.iter_mut().zip(&red) {
                            *gv += rv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                let ashape = self.nodes[a.0].value.shape().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    let red = reduce_to_shape(dy, &out_shape, &ashape);
                    for (gv, rv) in g.iter_mut().zip(&red) {
                        *gv += rv;
                    }
                }
                let bshape = self.nodes[b.0].value.shape().to_vec();
                if let Some(g) = self.acc(grads, *b) {
                    let red = reduce_to_shape(dy, &out_shape, &bshape);
                    for (gv, rv) in g.iter_mut().zip(&red) {
                        *gv -= rv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ashape = self.nodes[a.0].value.shape().to_vec();
                let bshape = self.nodes[b.0].value.shape().to_vec();
                if self.nodes[a.0].needs_grad {
                    let prod = broadcast_zip(
                        dy,
                        &out_shape,
                        self.nodes[b.0].value.data(),
                        &bshape,
                        &out_shape,
                        |g, y| g * y,
                    );
                    let red = reduce_to_shape(&prod, &out_shape, &ashape);
                    let g = self.acc(grads, a).unwrap();
                    for (gv, rv) in g.iter_mut().zip(&red) {
                        *gv += rv;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let prod = broadcast_zip(
                        dy,
                        &out_shape,
                        self.nodes[a.0].value.data(),
                        &ashape,
                        &out_shape,
                        |g, x| g * x,
                    );
                    let red = reduce_to_shape(&prod, &out_shape, &bshape);
                    let g = self.acc(grads, b).unwrap();
                    for (gv, rv) in g.iter_mut().zip(&red) {
                        *gv += rv;
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    for (gv, d) in g.iter_mut().zip(dy) {
                        *gv -= d;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(g) = self.acc(grads, *a) {
                    for (gv, d) in g.iter_mut().zip(dy) {
                        *gv += c * d;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let bdata = self.nodes[b.0].value.data().to_vec();
                    let g = self.acc(grads, a).unwrap();
                    mm_nt_acc(dy, &bdata, m, n, k, g);
                }
                if self.nodes[b.0].needs_grad {
                    let adata = self.nodes[a.0].value.data().to_vec();
                    let g = self.acc(grads, b).unwrap();
                    mm_tn_acc(&adata, dy, m, k, n, g);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out_shape[0], out_shape[1]);
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..n {
                        for j in 0..m {
                            g[j * n + i] += dy[i * m + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    for (gv, d) in g.iter_mut().zip(dy) {
                        *gv += d;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = lanes(&out_shape, *axis);
                let out_axis = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let plen = self.nodes[p.0].value.shape()[*axis];
                    if self.nodes[p.0].needs_grad {
                        let g = self.acc(grads, p).unwrap();
                        for o in 0..outer {
                            let src_start = (o * out_axis + offset) * inner;
                            let dst_start = o * plen * inner;
                            for j in 0..plen * inner {
                                g[dst_start + j] += dy[src_start + j];
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => {
                let sshape = self.nodes[src.0].value.shape().to_vec();
                let (outer, axis_len, inner) = lanes(&sshape, *axis);
                if let Some(g) = self.acc(grads, *src) {
                    for o in 0..outer {
                        let dst_start = (o * axis_len + start) * inner;
                        let src_start = o * len * inner;
                        for j in 0..len * inner {
                            g[dst_start + j] += dy[src_start + j];
                        }
                    }
                }
            }
            Op::Conv1d { input, kernel } => {
                let (input, kernel) = (*input, *kernel);
                let ishape = self.nodes[input.0].value.shape().to_vec();
                let kshape = self.nodes[kernel.0].value.shape().to_vec();
                let (m, c_in) = (ishape[1], ishape[2]);
                let (k, c_out) = (kshape[0], kshape[2]);
                let t_out = out_shape[0];
                if self.nodes[input.0].needs_grad {
                    let w = self.nodes[kernel.0].value.data().to_vec();
                    let g = self.acc(grads, input).unwrap();
                    for tau in 0..t_out {
                        for r in 0..m {
                            let dy_row = &dy[(tau * m + r) * c_out..(tau * m + r + 1) * c_out];
                            for delta in 0..k {
                                let g_row = &mut g[((tau + delta) * m + r) * c_in
                                    ..((tau + delta) * m + r + 1) * c_in];
                                for ci in 0..c_in {
                                    let w_row =
                                        &w[(delta * c_in + ci) * c_out..(delta * c_in + ci + 1) * c_out];
                                    let dot: f64 =
                                        dy_row.iter().zip(w_row).map(|(d, wv)| d * wv).sum();
                                    g_row[ci] += dot;
                                }
                            }
                        }
                    }
                }
                if self.nodes[kernel.0].needs_grad {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let g = self.acc(grads, kernel).unwrap();
                    for tau in 0..t_out {
                        for r in 0..m {
                            let dy_row = &dy[(tau * m + r) * c_out..(tau * m + r + 1) * c_out];
                            for delta in 0..k {
                                let x_row =
                                    &x[((tau + delta) * m + r) * c_in..((tau + delta) * m + r + 1) * c_in];
                                for (ci, &xv) in x_row.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let g_row = &mut g[(delta * c_in + ci) * c_out
                                        ..(delta * c_in + ci + 1) * c_out];
                                    for (gv, d) in g_row.iter_mut().zip(dy_row) {
                                        *gv += xv * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[id].value.data().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    for ((gv, d), yv) in g.iter_mut().zip(dy).zip(&y) {
                        *gv += d * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    for ((gv, d), xv) in g.iter_mut().zip(dy).zip(&x) {
                        if *xv > 0.0 {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    for ((gv, d), xv) in g.iter_mut().zip(dy).zip(&x) {
                        *gv += d * if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::Exp(a) => {
                let y = self.nodes[id].value.data().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    for ((gv, d), yv) in g.iter_mut().zip(dy).zip(&y) {
                        *gv += d * yv;
                    }
                }
            }
            Op::Ln(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    for ((gv, d), xv) in g.iter_mut().zip(dy).zip(&x) {
                        *gv += d / xv;
                    }
                }
            }
            Op::ClampMin(a, min) => {
                let min = *min;
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(g) = self.acc(grads, *a) {
                    for ((gv, d), xv) in g.iter_mut().zip(dy).zip(&x) {
                        if *xv >= min {
                            *gv += d;
                        }
                    }
                }
            }
            Op::SoftmaxAxis(a, axis) => {
                let y = self.nodes[id].value.data().to_vec();
                let (outer, len, inner) = lanes(&out_shape, *axis);
                if let Some(g) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += dy[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                g[idx] += y[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmaxAxis(a, axis) => {
                let y = self.nodes[id].value.data().to_vec();
                let (outer, len, inner) = lanes(&out_shape, *axis);
                if let Some(g) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut sum_dy = 0.0;
                            for j in 0..len {
                                sum_dy += dy[base + j * inner];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                g[idx] += dy[idx] - y[idx].exp() * sum_dy;
                            }
                        }
                    }
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let mean = matches!(self.nodes[id].op, Op::MeanAxis(..));
                let ashape = self.nodes[a.0].value.shape().to_vec();
                let (outer, len, inner) = lanes(&ashape, *axis);
                let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                if let Some(g) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                g[base + i] += dy[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let mean = matches!(self.nodes[id].op, Op::MeanAll(..));
                let n = self.nodes[a.0].value.numel();
                let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                if let Some(g) = self.acc(grads, *a) {
                    let d = dy[0] * scale;
                    for gv in g.iter_mut() {
                        *gv += d;
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one lane into `out`.
pub fn softmax_lane(lane: &[f64], out: &mut [f64]) {
    let mx = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(lane) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    /// `seed`-deterministic central finite difference of a tape-built scalar
    /// against the analytic gradient; returns max relative error.
    fn fd_max_rel<F>(shapes: &[Vec<usize>], seed: u64, build: F) -> f64
    where
        F: Fn(&mut Tape, &[VarId]) -> VarId,
    {
        let mut r = rng(seed);
        let mut tensors: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s.clone(), &mut r)).collect();
        // Keep random inputs away from the kinks of relu/abs at the origin.
        for t in &mut tensors {
            for v in t.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.01;
                }
            }
        }
        let eval = |tensors: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
            let loss = build(&mut tape, &ids);
            let grads = tape.backward(loss).unwrap();
            let g = ids
                .iter()
                .map(|&i| grads.of(i).map(|s| s.to_vec()).unwrap_or_default())
                .collect();
            (tape.value(loss).data()[0], g)
        };
        let (_, analytic) = eval(&tensors);
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for (ti, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            for e in 0..n {
                let orig = tensors[ti].data()[e];
                tensors[ti].data_mut()[e] = orig + eps;
                let (fp, _) = eval(&tensors);
                tensors[ti].data_mut()[e] = orig - eps;
                let (fm, _) = eval(&tensors);
                tensors[ti].data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let an = analytic[ti][e];
                let rel = (an - fd).abs() / 1.0_f64.max(an.abs()).max(fd.abs());
                max_rel = max_rel.max(rel);
            }
        }
        max_rel
    }

    // One FD check per operation kind.

    #[test]
    fn grad_matmul() {
        let err = fd_max_rel(&[vec![3, 4], vec![4, 2]], 1, |t, ids| {
            let m = t.matmul(ids[0], ids[1]);
            let s = t.sigmoid(m);
            t.sum_all(s)
        });
        assert!(err < 1e-6, "matmul FD error {err}");
    }

    #[test]
    fn grad_add_mul_broadcast() {
        let err = fd_max_rel(&[vec![2, 3, 4], vec![4], vec![3, 4]], 2, |t, ids| {
            let a = t.add(ids[0], ids[1]);
            let m = t.mul(a, ids[2]);
            let s = t.sub(m, ids[1]);
            t.mean_all(s)
        });
        assert!(err < 1e-6, "broadcast add/mul FD error {err}");
    }

    #[test]
    fn grad_sigmoid_exp_ln() {
        let err = fd_max_rel(&[vec![5]], 3, |t, ids| {
            let s = t.sigmoid(ids[0]);
            let e = t.exp(s);
            let l = t.ln(e);
            t.sum_all(l)
        });
        assert!(err < 1e-6, "sigmoid/exp/ln FD error {err}");
    }

    #[test]
    fn grad_softmax_both_axes() {
        for axis in 0..2 {
            let err = fd_max_rel(&[vec![3, 4]], 4 + axis as u64, |t, ids| {
                let s = t.softmax_axis(ids[0], axis);
                let w = t.exp(s);
                t.sum_all(w)
            });
            assert!(err < 1e-6, "softmax axis {axis} FD error {err}");
        }
    }

    #[test]
    fn grad_log_softmax() {
        let err = fd_max_rel(&[vec![4, 3]], 6, |t, ids| {
            let s = t.log_softmax_axis(ids[0], 1);
            let w = t.mul(s, s);
            t.sum_all(w)
        });
        assert!(err < 1e-6, "log_softmax FD error {err}");
    }

    #[test]
    fn grad_concat_slice() {
        let err = fd_max_rel(&[vec![2, 3], vec![2, 3]], 7, |t, ids| {
            let c = t.concat(0, &[ids[0], ids[1]]);
            let s = t.slice_axis(c, 0, 1, 2);
            let sq = t.mul(s, s);
            t.sum_all(sq)
        });
        assert!(err < 1e-6, "concat/slice FD error {err}");
    }

    #[test]
    fn grad_mean_sum_axis() {
        let err = fd_max_rel(&[vec![3, 2, 4]], 8, |t, ids| {
            let m = t.mean_axis(ids[0], 0);
            let s = t.sum_axis(m, 1);
            let sq = t.mul(s, s);
            t.mean_all(sq)
        });
        assert!(err < 1e-6, "mean/sum axis FD error {err}");
    }

    #[test]
    fn grad_abs_relu() {
        let err = fd_max_rel(&[vec![6]], 9, |t, ids| {
            let a = t.abs(ids[0]);
            let r = t.relu(ids[0]);
            let s = t.add(a, r);
            t.sum_all(s)
        });
        assert!(err < 1e-6, "abs/relu FD error {err}");
    }

    #[test]
    fn grad_conv1d() {
        let err = fd_max_rel(&[vec![5, 2, 3], vec![3, 3, 2]], 10, |t, ids| {
            let c = t.conv1d(ids[0], ids[1]);
            let s = t.sigmoid(c);
            t.sum_all(s)
        });
        assert!(err < 1e-6, "conv1d FD error {err}");
    }

    #[test]
    fn grad_transpose_reshape_scale_neg_clamp() {
        let err = fd_max_rel(&[vec![3, 4]], 11, |t, ids| {
            let tr = t.transpose(ids[0]);
            let rs = t.reshape(tr, vec![2, 6]);
            let sc = t.scale(rs, 2.5);
            let ng = t.neg(sc);
            let cl = t.clamp_min(ng, -1.2);
            t.sum_all(cl)
        });
        assert!(err < 1e-6, "shape-op chain FD error {err}");
    }

    // Contract cases.

    #[test]
    fn backward_square_sum() {
        let mut t = Tape::new();
        let w = t.param(Tensor::new(vec![1], vec![3.0]));
        let sq = t.mul(w, w);
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        assert!((g.of(w).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_unreachable_param_zero_grad() {
        let mut t = Tape::new();
        let w = t.param(Tensor::new(vec![1], vec![3.0]));
        let c = t.constant(Tensor::scalar(7.0));
        let loss = t.sum_all(c);
        let g = t.backward(loss).unwrap();
        let map = g.param_map(&t);
        assert_eq!(map[&w].data(), &[0.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut t = Tape::new();
        let w1 = t.param(Tensor::scalar(2.0));
        let w2 = t.param(Tensor::scalar(5.0));
        let p = t.mul(w1, w2);
        let loss = t.sum_all(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.of(w1).unwrap()[0], 5.0);
        assert_eq!(g.of(w2).unwrap()[0], 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(vec![2]));
        let y = t.relu(w);
        match t.backward(y) {
            Err(DiffError::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn backward_reports_nan_with_op_name() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(-1.0));
        let l = t.ln(w); // NaN
        let loss = t.sum_all(l);
        match t.backward(loss) {
            Err(DiffError::NonFinite { op, .. }) => assert_eq!(op, "ln"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn backward_linearity() {
        // grad(a·f + b·g) == a·grad(f) + b·grad(g)
        let mut r = rng(12);
        let x = rand_tensor(vec![4], &mut r);
        let (a, b) = (1.7, -0.6);
        let grad_of = |mode: u8| -> Vec<f64> {
            let mut t = Tape::new();
            let w = t.param(x.clone());
            let f = {
                let s = t.sigmoid(w);
                t.sum_all(s)
            };
            let g = {
                let m = t.mul(w, w);
                t.sum_all(m)
            };
            let loss = match mode {
                0 => t.scale(f, a),
                1 => t.scale(g, b),
                _ => {
                    let fa = t.scale(f, a);
                    let gb = t.scale(g, b);
                    t.add(fa, gb)
                }
            };
            t.backward(loss).unwrap().of(w).unwrap().to_vec()
        };
        let gf = grad_of(0);
        let gg = grad_of(1);
        let gsum = grad_of(2);
        for i in 0..4 {
            assert!((gsum[i] - (gf[i] + gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let mut r = rng(99);
            let w = t.param(rand_tensor(vec![3, 3], &mut r));
            let m = t.matmul(w, w);
            let s = t.softmax_axis(m, 1);
            let loss = t.sum_all(s);
            (tape_bits(&t, loss), {
                let g = t.backward(loss).unwrap();
                g.of(w).unwrap().to_vec()
            })
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    fn tape_bits(t: &Tape, v: VarId) -> u64 {
        t.value(v).data()[0].to_bits()
    }

    #[test]
    fn concat_and_slice_roundtrip_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(Tensor::new(vec![1, 2], vec![5.0, 6.0]));
        let c = t.concat(0, &[a, b]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t.slice_axis(c, 0, 2, 1);
        assert_eq!(t.value(s).data(), &[5.0, 6.0]);
        let s2 = t.slice_axis(c, 1, 1, 1);
        assert_eq!(t.value(s2).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2], vec![0.0, 2.0_f64.ln()]));
        let s = t.softmax_axis(x, 0);
        let d = t.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);
    }
}
