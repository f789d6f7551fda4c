//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations append nodes to a topologically ordered tape; `backward`
//! replays the tape in reverse, accumulating gradients into every
//! `requires_grad` leaf. Gradients accumulate across repeated backward
//! calls until `zero_grads` is invoked.
//!
//! Shape mismatches are programming errors and panic with a
//! `dimension error:` message. Non-finite values produced mid-compute are
//! recorded and surfaced by `ensure_finite`.

use crate::error::{Error, Result};
use crate::numerics::tensor::{strides, Tensor};

pub type VarId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddScalar(VarId),
    MulScalar(VarId, f64),
    Neg(VarId),
    Exp(VarId),
    Log(VarId),
    Sqrt(VarId),
    Relu(VarId),
    Gelu(VarId),
    ClampMin(VarId, f64),
    Matmul(VarId, VarId),
    Bmm(VarId, VarId),
    Permute(VarId, Vec<usize>),
    Reshape(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    SumAxis(VarId, usize),
    MeanAxis(VarId, usize),
    ExpandAxis(VarId, usize, usize),
    Softmax(VarId, usize),
    LayerNorm(VarId, f64),
    Concat(Vec<VarId>, usize),
    Slice(VarId, usize, usize, usize),
    IndexSelect(VarId, Vec<usize>),
    AddLast(VarId, VarId),
    MulLast(VarId, VarId),
    Conv1d {
        input: VarId,
        kernel: VarId,
        bias: VarId,
        pad: usize,
    },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Neg(..) => "neg",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::ClampMin(..) => "clamp_min",
        Op::Matmul(..) => "matmul",
        Op::Bmm(..) => "bmm",
        Op::Permute(..) => "permute",
        Op::Reshape(..) => "reshape",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::SumAxis(..) => "sum_axis",
        Op::MeanAxis(..) => "mean_axis",
        Op::ExpandAxis(..) => "expand_axis",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm(..) => "layer_norm",
        Op::Concat(..) => "concat",
        Op::Slice(..) => "slice",
        Op::IndexSelect(..) => "index_select",
        Op::AddLast(..) => "add_last",
        Op::MulLast(..) => "mul_last",
        Op::Conv1d { .. } => "conv1d",
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    nonfinite: Option<(usize, &'static str)>,
}

/// Iterate lanes along `axis` of `shape`; calls `f(lane_base_offsets)` where
/// the lane's elements are `base + i * inner` for `i in 0..n`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for j in 0..inner {
            f(o * n * inner + j, n, inner);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. Gradients are accumulated for it iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        self.push(value, requires_grad, Op::Leaf, grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VarId) -> Option<Tensor> {
        let node = &self.nodes[id];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_raw(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Error if any recorded operation produced a non-finite value.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, grad: Option<Vec<f64>>) -> VarId {
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((id, op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        id
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[VarId], op: Op) -> VarId {
        let rg = inputs.iter().any(|&i| self.requires(i));
        self.push(Tensor::from_raw(shape, data), rg, op, None)
    }

    fn same_shape(&self, a: VarId, b: VarId, what: &str) {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "dimension error: {} requires equal shapes, got {:?} vs {:?}",
            what,
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape()
        );
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.same_shape(a, b, "add");
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.same_shape(a, b, "sub");
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.same_shape(a, b, "mul");
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a, b], Op::Mul(a, b))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        self.same_shape(a, b, "div");
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a, b], Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x + c).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x * c).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| -x).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::Neg(a))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::Exp(a))
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::Log(a))
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x.sqrt()).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::Relu(a))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::Gelu(a))
    }

    pub fn clamp_min(&mut self, a: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| x.max(c)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.record(shape, data, &[a], Op::ClampMin(a, c))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "dimension error: matmul of {:?} and {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            m,
            k,
            n,
        );
        self.record(vec![m, n], data, &[a, b], Op::Matmul(a, b))
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: VarId, b: VarId) -> VarId {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "dimension error: bmm of {:?} and {:?}",
            sa,
            sb
        );
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let c = matmul_raw(
                &self.nodes[a].value.data()[i * m * k..(i + 1) * m * k],
                &self.nodes[b].value.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            data[i * m * n..(i + 1) * m * n].copy_from_slice(&c);
        }
        self.record(vec![bsz, m, n], data, &[a, b], Op::Bmm(a, b))
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn permute(&mut self, a: VarId, perm: &[usize]) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        assert_eq!(
            perm.len(),
            shape.len(),
            "dimension error: permute {:?} with {:?}",
            shape,
            perm
        );
        let (data, out_shape) = permute_raw(self.nodes[a].value.data(), &shape, perm);
        self.record(out_shape, data, &[a], Op::Permute(a, perm.to_vec()))
    }

    pub fn reshape(&mut self, a: VarId, new_shape: &[usize]) -> VarId {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            self.nodes[a].value.numel(),
            "dimension error: reshape {:?} to {:?}",
            self.nodes[a].value.shape(),
            new_shape
        );
        let data = self.nodes[a].value.data().to_vec();
        self.record(new_shape.to_vec(), data, &[a], Op::Reshape(a))
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> VarId {
        assert!(!parts.is_empty(), "dimension error: concat of zero tensors");
        let first = self.nodes[parts[0]].value.shape().to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            assert_eq!(s.len(), first.len(), "dimension error: concat rank mismatch");
            for (ax, (&d, &e)) in s.iter().zip(&first).enumerate() {
                assert!(
                    ax == axis || d == e,
                    "dimension error: concat shapes {:?} vs {:?} on axis {}",
                    s,
                    first,
                    axis
                );
            }
            out_shape[axis] += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for &p in parts {
            let s = self.nodes[p].value.shape();
            let na = s[axis];
            let src = self.nodes[p].value.data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * na * inner;
                data[dst_base..dst_base + na * inner]
                    .copy_from_slice(&src[src_base..src_base + na * inner]);
            }
            offset += na;
        }
        self.record(out_shape, data, parts, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, end: usize) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        assert!(
            axis < shape.len() && start <= end && end <= shape[axis],
            "dimension error: slice [{start}, {end}) on axis {axis} of {:?}",
            shape
        );
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let na = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let mut data = vec![0.0; out_shape.iter().product()];
        let src = self.nodes[a].value.data();
        for o in 0..outer {
            let src_base = (o * na + start) * inner;
            let dst_base = o * (end - start) * inner;
            data[dst_base..dst_base + (end - start) * inner]
                .copy_from_slice(&src[src_base..src_base + (end - start) * inner]);
        }
        self.record(out_shape, data, &[a], Op::Slice(a, axis, start, end))
    }

    /// Select rows along axis 0.
    pub fn index_select(&mut self, a: VarId, indices: &[usize]) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        for &i in indices {
            assert!(i < rows, "dimension error: index {} out of {} rows", i, rows);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let src = self.nodes[a].value.data();
        let mut data = vec![0.0; indices.len() * inner];
        for (j, &i) in indices.iter().enumerate() {
            data[j * inner..(j + 1) * inner].copy_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        self.record(out_shape, data, &[a], Op::IndexSelect(a, indices.to_vec()))
    }

    /// Insert a repeated axis of size `n` at position `axis`.
    pub fn expand_axis(&mut self, a: VarId, axis: usize, n: usize) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        assert!(axis <= shape.len(), "dimension error: expand_axis {axis} on {:?}", shape);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.nodes[a].value.data();
        let mut data = vec![0.0; outer * n * inner];
        for o in 0..outer {
            for j in 0..n {
                data[(o * n + j) * inner..(o * n + j + 1) * inner]
                    .copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.insert(axis, n);
        self.record(out_shape, data, &[a], Op::ExpandAxis(a, axis, n))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.record(vec![1], vec![s], &[a], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].value.numel() as f64;
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.record(vec![1], vec![s / n], &[a], Op::MeanAll(a))
    }

    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        assert!(axis < shape.len(), "dimension error: sum_axis {axis} on {:?}", shape);
        let src = self.nodes[a].value.data();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    data[o * inner + j] += src[(o * n + i) * inner + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.record(out_shape, data, &[a], Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> VarId {
        let n = self.nodes[a].value.shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        // replace the recorded op so backward scales correctly in one node
        let data: Vec<f64> = self.nodes[s].value.data().iter().map(|v| v / n).collect();
        let shape = self.nodes[s].value.shape().to_vec();
        self.nodes.pop();
        self.record(shape, data, &[a], Op::MeanAxis(a, axis))
    }

    // ── fused neural ops ────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, a: VarId, axis: usize) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        assert!(axis < shape.len(), "dimension error: softmax axis {axis} on {:?}", shape);
        let src = self.nodes[a].value.data();
        let mut data = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |base, n, inner| {
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(src[base + i * inner]);
            }
            let mut z = 0.0;
            for i in 0..n {
                let e = (src[base + i * inner] - m).exp();
                data[base + i * inner] = e;
                z += e;
            }
            for i in 0..n {
                data[base + i * inner] /= z;
            }
        });
        self.record(shape, data, &[a], Op::Softmax(a, axis))
    }

    /// Normalize over the last axis: `(x - mean) / sqrt(var + eps)`.
    /// Affine scale/shift is applied separately via `mul_last`/`add_last`.
    pub fn layer_norm(&mut self, a: VarId, eps: f64) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        let axis = shape.len() - 1;
        let src = self.nodes[a].value.data();
        let mut data = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |base, n, inner| {
            let mut mean = 0.0;
            for i in 0..n {
                mean += src[base + i * inner];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let d = src[base + i * inner] - mean;
                var += d * d;
            }
            var /= n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                data[base + i * inner] = (src[base + i * inner] - mean) * inv;
            }
        });
        self.record(shape, data, &[a], Op::LayerNorm(a, eps))
    }

    /// Broadcast add of a `[d]` vector over the last axis of `a`.
    pub fn add_last(&mut self, a: VarId, b: VarId) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        let d = *shape.last().expect("add_last on rank-0");
        assert_eq!(
            self.nodes[b].value.shape(),
            &[d],
            "dimension error: add_last {:?} + {:?}",
            shape,
            self.nodes[b].value.shape()
        );
        let bv = self.nodes[b].value.data().to_vec();
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        self.record(shape, data, &[a, b], Op::AddLast(a, b))
    }

    /// Broadcast multiply by a `[d]` vector over the last axis of `a`.
    pub fn mul_last(&mut self, a: VarId, b: VarId) -> VarId {
        let shape = self.nodes[a].value.shape().to_vec();
        let d = *shape.last().expect("mul_last on rank-0");
        assert_eq!(
            self.nodes[b].value.shape(),
            &[d],
            "dimension error: mul_last {:?} * {:?}",
            shape,
            self.nodes[b].value.shape()
        );
        let bv = self.nodes[b].value.data().to_vec();
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % d])
            .collect();
        self.record(shape, data, &[a, b], Op::MulLast(a, b))
    }

    /// Same-padded 1-D convolution over time.
    /// `input [B,L,Cin]`, `kernel [K,Cin,Cout]` (K odd), `bias [Cout]`.
    pub fn conv1d(&mut self, input: VarId, kernel: VarId, bias: VarId) -> VarId {
        let si = self.nodes[input].value.shape().to_vec();
        let sk = self.nodes[kernel].value.shape().to_vec();
        assert!(
            si.len() == 3 && sk.len() == 3 && si[2] == sk[1] && sk[0] % 2 == 1,
            "dimension error: conv1d input {:?} kernel {:?}",
            si,
            sk
        );
        let (bsz, len, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sk[0], sk[2]);
        assert_eq!(
            self.nodes[bias].value.shape(),
            &[cout],
            "dimension error: conv1d bias {:?}",
            self.nodes[bias].value.shape()
        );
        let pad = (k - 1) / 2;
        let x = self.nodes[input].value.data();
        let w = self.nodes[kernel].value.data();
        let bv = self.nodes[bias].value.data();
        let mut data = vec![0.0; bsz * len * cout];
        for b in 0..bsz {
            for t in 0..len {
                for co in 0..cout {
                    let mut acc = bv[co];
                    for dk in 0..k {
                        let u = t as isize + dk as isize - pad as isize;
                        if u < 0 || u >= len as isize {
                            continue;
                        }
                        let u = u as usize;
                        for ci in 0..cin {
                            acc += x[(b * len + u) * cin + ci] * w[(dk * cin + ci) * cout + co];
                        }
                    }
                    data[(b * len + t) * cout + co] = acc;
                }
            }
        }
        self.record(
            vec![bsz, len, cout],
            data,
            &[input, kernel, bias],
            Op::Conv1d {
                input,
                kernel,
                bias,
                pad,
            },
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate `dLoss/dLeaf` into every `requires_grad` leaf.
    /// Repeated calls without `zero_grads` accumulate.
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(
            self.nodes[loss].value.numel(),
            1,
            "dimension error: backward requires a scalar loss, got {:?}",
            self.nodes[loss].value.shape()
        );
        let n = loss + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);
        for id in (0..n).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let gout = grads[id].take().unwrap();
            self.propagate(id, &gout, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                if let Some(acc) = self.nodes[id].grad.as_mut() {
                    for (a, g) in acc.iter_mut().zip(&gout) {
                        *a += g;
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: VarId, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.numel()]);
        contrib(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: VarId, gout: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, |g| add_into(g, gout, 1.0));
                self.accumulate(grads, b, |g| add_into(g, gout, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, |g| add_into(g, gout, 1.0));
                self.accumulate(grads, b, |g| add_into(g, gout, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                self.accumulate(grads, b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / bv[i];
                    }
                });
                self.accumulate(grads, b, |g| {
                    for i in 0..g.len() {
                        g[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, a, |g| add_into(g, gout, 1.0)),
            Op::MulScalar(a, c) => self.accumulate(grads, a, |g| add_into(g, gout, c)),
            Op::Neg(a) => self.accumulate(grads, a, |g| add_into(g, gout, -1.0)),
            Op::Exp(a) => {
                let yv = self.nodes[id].value.data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * yv[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = self.nodes[a].value.data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / av[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = self.nodes[id].value.data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * 0.5 / yv[i];
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.nodes[a].value.data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.nodes[a].value.data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_deriv(av[i]);
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let av = self.nodes[a].value.data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        if av[i] > c {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                // dA = dC . B^T ; dB = A^T . dC
                self.accumulate(grads, a, |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, b, |g| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * gout[i * n + j];
                            }
                            g[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Bmm(a, b) => {
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                self.accumulate(grads, a, |g| {
                    for t in 0..bsz {
                        let (go, bo, ao) = (t * m * n, t * k * n, t * m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gout[go + i * n + j] * bv[bo + p * n + j];
                                }
                                g[ao + i * k + p] += s;
                            }
                        }
                    }
                });
                self.accumulate(grads, b, |g| {
                    for t in 0..bsz {
                        let (go, bo, ao) = (t * m * n, t * k * n, t * m * k);
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[ao + i * k + p] * gout[go + i * n + j];
                                }
                                g[bo + p * n + j] += s;
                            }
                        }
                    }
                });
            }
            Op::Permute(a, perm) => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                // inverse permutation maps output grads back to input layout
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (gperm, _) = permute_raw(gout, &out_shape, &inv);
                self.accumulate(grads, a, |g| add_into(g, &gperm, 1.0));
            }
            Op::Reshape(a) => self.accumulate(grads, a, |g| add_into(g, gout, 1.0)),
            Op::SumAll(a) => {
                let go = gout[0];
                self.accumulate(grads, a, |g| g.iter_mut().for_each(|v| *v += go));
            }
            Op::MeanAll(a) => {
                let go = gout[0] / self.nodes[a].value.numel() as f64;
                self.accumulate(grads, a, |g| g.iter_mut().for_each(|v| *v += go));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let scale = if matches!(self.nodes[id].op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                self.accumulate(grads, a, |g| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                g[(o * n + i) * inner + j] += gout[o * inner + j] * scale;
                            }
                        }
                    }
                });
            }
            Op::ExpandAxis(a, axis, n) => {
                let in_shape = self.nodes[a].value.shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis..].iter().product();
                self.accumulate(grads, a, |g| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                g[o * inner + i] += gout[(o * n + j) * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let shape = self.nodes[id].value.shape().to_vec();
                let yv = self.nodes[id].value.data();
                self.accumulate(grads, a, |g| {
                    for_each_lane(&shape, axis, |base, n, inner| {
                        let mut dot = 0.0;
                        for i in 0..n {
                            dot += gout[base + i * inner] * yv[base + i * inner];
                        }
                        for i in 0..n {
                            let idx = base + i * inner;
                            g[idx] += yv[idx] * (gout[idx] - dot);
                        }
                    });
                });
            }
            Op::LayerNorm(a, eps) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let axis = shape.len() - 1;
                let xv = self.nodes[a].value.data();
                let yv = self.nodes[id].value.data();
                self.accumulate(grads, a, |g| {
                    for_each_lane(&shape, axis, |base, n, inner| {
                        let nf = n as f64;
                        let mut mean = 0.0;
                        for i in 0..n {
                            mean += xv[base + i * inner];
                        }
                        mean /= nf;
                        let mut var = 0.0;
                        for i in 0..n {
                            let d = xv[base + i * inner] - mean;
                            var += d * d;
                        }
                        var /= nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut gmean = 0.0;
                        let mut gydot = 0.0;
                        for i in 0..n {
                            gmean += gout[base + i * inner];
                            gydot += gout[base + i * inner] * yv[base + i * inner];
                        }
                        gmean /= nf;
                        gydot /= nf;
                        for i in 0..n {
                            let idx = base + i * inner;
                            g[idx] += inv * (gout[idx] - gmean - yv[idx] * gydot);
                        }
                    });
                });
            }
            Op::Concat(parts, axis) => {
                let first = self.nodes[parts[0]].value.shape().to_vec();
                let inner: usize = first[axis + 1..].iter().product();
                let outer: usize = first[..axis].iter().product();
                let total_axis = self.nodes[id].value.shape()[axis];
                let mut offset = 0;
                for &p in &parts {
                    let na = self.nodes[p].value.shape()[axis];
                    let off = offset;
                    self.accumulate(grads, p, |g| {
                        for o in 0..outer {
                            let src_base = (o * total_axis + off) * inner;
                            let dst_base = o * na * inner;
                            for i in 0..na * inner {
                                g[dst_base + i] += gout[src_base + i];
                            }
                        }
                    });
                    offset += na;
                }
            }
            Op::Slice(a, axis, start, end) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let na = shape[axis];
                self.accumulate(grads, a, |g| {
                    for o in 0..outer {
                        let dst_base = (o * na + start) * inner;
                        let src_base = o * (end - start) * inner;
                        for i in 0..(end - start) * inner {
                            g[dst_base + i] += gout[src_base + i];
                        }
                    }
                });
            }
            Op::IndexSelect(a, indices) => {
                let inner: usize = self.nodes[a].value.shape()[1..].iter().product();
                self.accumulate(grads, a, |g| {
                    for (j, &i) in indices.iter().enumerate() {
                        for t in 0..inner {
                            g[i * inner + t] += gout[j * inner + t];
                        }
                    }
                });
            }
            Op::AddLast(a, b) => {
                let d = self.nodes[b].value.numel();
                self.accumulate(grads, a, |g| add_into(g, gout, 1.0));
                self.accumulate(grads, b, |g| {
                    for (i, &v) in gout.iter().enumerate() {
                        g[i % d] += v;
                    }
                });
            }
            Op::MulLast(a, b) => {
                let d = self.nodes[b].value.numel();
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                self.accumulate(grads, a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i % d];
                    }
                });
                self.accumulate(grads, b, |g| {
                    for (i, &v) in gout.iter().enumerate() {
                        g[i % d] += v * av[i];
                    }
                });
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                pad,
            } => {
                let si = self.nodes[input].value.shape().to_vec();
                let sk = self.nodes[kernel].value.shape().to_vec();
                let (bsz, len, cin) = (si[0], si[1], si[2]);
                let (k, cout) = (sk[0], sk[2]);
                let xv = self.nodes[input].value.data();
                let wv = self.nodes[kernel].value.data();
                self.accumulate(grads, input, |g| {
                    for b in 0..bsz {
                        for t in 0..len {
                            for co in 0..cout {
                                let go = gout[(b * len + t) * cout + co];
                                for dk in 0..k {
                                    let u = t as isize + dk as isize - pad as isize;
                                    if u < 0 || u >= len as isize {
                                        continue;
                                    }
                                    let u = u as usize;
                                    for ci in 0..cin {
                                        g[(b * len + u) * cin + ci] +=
                                            go * wv[(dk * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, kernel, |g| {
                    for b in 0..bsz {
                        for t in 0..len {
                            for co in 0..cout {
                                let go = gout[(b * len + t) * cout + co];
                                for dk in 0..k {
                                    let u = t as isize + dk as isize - pad as isize;
                                    if u < 0 || u >= len as isize {
                                        continue;
                                    }
                                    let u = u as usize;
                                    for ci in 0..cin {
                                        g[(dk * cin + ci) * cout + co] +=
                                            go * xv[(b * len + u) * cin + ci];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, bias, |g| {
                    for b in 0..bsz {
                        for t in 0..len {
                            for co in 0..cout {
                                g[co] += gout[(b * len + t) * cout + co];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn permute_raw(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; data.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for (flat, &v) in data.iter().enumerate() {
        // multi-index of `flat` in input layout
        let mut rem = flat;
        for (ax, &s) in in_strides.iter().enumerate() {
            idx[ax] = rem / s;
            rem %= s;
        }
        let mut of = 0;
        for (oax, &p) in perm.iter().enumerate() {
            of += idx[p] * out_strides[oax];
        }
        out[of] = v;
    }
    (out, out_shape)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
