//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `Vec<f64>` storage, a
//! define-by-run [`Tape`] that is rebuilt on every forward pass, and exactly
//! the operations the forecasting network needs. Gradients are checked
//! against central finite differences (see [`finite_diff_check`]).

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

/// Identifier of a node on a [`Tape`].
pub type NodeId = usize;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes cannot be combined by the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Data length does not match the product of the shape dimensions.
    DataLength { expected: usize, got: usize },
    /// A reduction or indexing axis is out of range for the tensor rank.
    InvalidAxis { axis: usize, rank: usize },
    /// `backward` was called on a tensor that is not a scalar.
    NotScalar { shape: Vec<usize> },
    /// `backward` was called on a tensor that is not recorded on this tape.
    DetachedTensor,
    /// An index along an axis is out of bounds.
    IndexOutOfBounds { axis: usize, index: usize, len: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length mismatch: shape expects {expected} elements, got {got}")
            }
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank-{rank} tensor")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::DetachedTensor => {
                write!(f, "tensor is not recorded on the active tape")
            }
            TensorError::IndexOutOfBounds { axis, index, len } => {
                write!(f, "index {index} out of bounds for axis {axis} of length {len}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional array of f64 in row-major order.
///
/// A tensor may carry a handle into the tape that produced it; tensors built
/// directly from data are plain values until an op registers them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<(u64, NodeId)>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape, data, node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        // Mutating a tensor detaches it from any recorded graph.
        self.node = None;
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|(_, id)| id)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Local backward rule of a recorded operation.
#[derive(Debug, Clone)]
enum Rule {
    Leaf,
    Unary(UnaryOp),
    Binary(BinaryOp),
    Matmul,
    BatchMatmul,
    Transpose,
    SoftmaxRows,
    Concat { axis: usize, extents: Vec<usize> },
    Reduce { kind: ReduceKind, axes: Option<Vec<usize>>, input_shape: Vec<usize> },
    IndexAxis { axis: usize, index: usize, input_shape: Vec<usize> },
    Reshape { input_shape: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    parents: Vec<NodeId>,
    rule: Rule,
    requires_grad: bool,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Gradients produced by [`Tape::backward`], keyed by leaf node id.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given leaf tensor, if any
    /// gradient flowed to it.
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        leaf.node_id().and_then(|id| self.by_node.get(&id))
    }

    pub fn by_node_id(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

/// Record of one forward pass. Rebuilt from scratch for every pass; consumed
/// by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, parents: Vec<NodeId>, rule: Rule) -> Tensor {
        let requires_grad = match rule {
            Rule::Leaf => false, // set explicitly by `leaf`
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape: shape.clone(),
            value: value.clone(),
            parents,
            rule,
            requires_grad,
        });
        Tensor { shape, data: value, node: Some((self.id, id)) }
    }

    /// Register a tensor as a leaf on this tape.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        let out = self.push(t.shape.clone(), t.data.clone(), Vec::new(), Rule::Leaf);
        if let Some((_, id)) = out.node {
            self.nodes[id].requires_grad = requires_grad;
        }
        out
    }

    /// Node id of `t` on this tape, registering it as a constant leaf when it
    /// is untracked or belongs to a different tape.
    fn track(&mut self, t: &Tensor) -> NodeId {
        match t.node {
            Some((tape_id, id)) if tape_id == self.id => id,
            _ => {
                let leaf = self.push(t.shape.clone(), t.data.clone(), Vec::new(), Rule::Leaf);
                leaf.node_id().unwrap()
            }
        }
    }

    // ---- elementwise ----

    pub fn unary(&mut self, x: &Tensor, op: UnaryOp) -> Tensor {
        let xid = self.track(x);
        let value: Vec<f64> = x
            .data
            .iter()
            .map(|&v| match op {
                UnaryOp::Relu => v.max(0.0),
                UnaryOp::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Abs => v.abs(),
                UnaryOp::Neg => -v,
            })
            .collect();
        self.push(x.shape.clone(), value, vec![xid], Rule::Unary(op))
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, UnaryOp::Relu)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, UnaryOp::Tanh)
    }

    pub fn abs(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, UnaryOp::Abs)
    }

    pub fn neg(&mut self, x: &Tensor) -> Tensor {
        self.unary(x, UnaryOp::Neg)
    }

    /// Elementwise binary op. `b` must have the same shape as `a`, be a
    /// scalar, or have a shape that is a trailing suffix of `a`'s shape.
    pub fn binary(&mut self, a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor, TensorError> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        if !broadcastable(&a.shape, &b.shape) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let aid = self.track(a);
        let bid = self.track(b);
        let bn = b.data.len();
        let mut value = Vec::with_capacity(a.data.len());
        for (i, &av) in a.data.iter().enumerate() {
            let bv = b.data[i % bn];
            value.push(match op {
                BinaryOp::Add => av + bv,
                BinaryOp::Sub => av - bv,
                BinaryOp::Mul => av * bv,
            });
        }
        Ok(self.push(a.shape.clone(), value, vec![aid, bid], Rule::Binary(op)))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn add_scalar(&mut self, a: &Tensor, v: f64) -> Result<Tensor, TensorError> {
        let s = Tensor::scalar(v);
        self.add(a, &s)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, v: f64) -> Result<Tensor, TensorError> {
        let s = Tensor::scalar(v);
        self.mul(a, &s)
    }

    // ---- linear algebra ----

    /// Matrix product. `a` is `m x k` or batched `B x m x k`; `b` is `k x n`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, k) = match a.rank() {
            2 => (a.shape[0], a.shape[1]),
            3 => (a.shape[0] * a.shape[1], a.shape[2]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                })
            }
        };
        if b.rank() != 2 || b.shape[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let n = b.shape[1];
        let value = matmul_raw(&a.data, &b.data, rows, k, n);
        let out_shape = match a.rank() {
            2 => vec![rows, n],
            _ => vec![a.shape[0], a.shape[1], n],
        };
        let aid = self.track(a);
        let bid = self.track(b);
        Ok(self.push(out_shape, value, vec![aid, bid], Rule::Matmul))
    }

    /// Batched matrix product: `a` is `B x m x k`, `b` is `B x k x n`.
    pub fn bmm(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
        let n = b.shape[2];
        let mut value = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let av = &a.data[bi * m * k..(bi + 1) * m * k];
            let bv = &b.data[bi * k * n..(bi + 1) * k * n];
            let out = &mut value[bi * m * n..(bi + 1) * m * n];
            matmul_into(av, bv, m, k, n, out);
        }
        let aid = self.track(a);
        let bid = self.track(b);
        Ok(self.push(vec![batch, m, n], value, vec![aid, bid], Rule::BatchMatmul))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                left: x.shape.clone(),
                right: vec![],
            });
        }
        let (m, n) = (x.shape[0], x.shape[1]);
        let value = transpose_raw(&x.data, m, n);
        let xid = self.track(x);
        Ok(self.push(vec![n, m], value, vec![xid], Rule::Transpose))
    }

    /// Row-wise softmax of a rank-2 tensor, computed with row-max subtraction.
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows",
                left: x.shape.clone(),
                right: vec![],
            });
        }
        let (m, n) = (x.shape[0], x.shape[1]);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut value[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let xid = self.track(x);
        Ok(self.push(x.shape.clone(), value, vec![xid], Rule::SoftmaxRows))
    }

    // ---- structure ----

    /// Concatenate tensors along `axis`. All shapes must agree except on the
    /// concatenation axis.
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::ShapeMismatch {
            op: "concat",
            left: vec![],
            right: vec![],
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        for p in parts {
            if p.rank() != rank
                || (0..rank).any(|d| d != axis && p.shape[d] != first.shape[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
        }
        let extents: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let mut out_shape = first.shape.clone();
        out_shape[axis] = extents.iter().sum();
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut value = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for p in parts {
            let e = p.shape[axis];
            for o in 0..outer {
                let src = &p.data[o * e * inner..(o + 1) * e * inner];
                let dst_start = (o * total_axis + offset) * inner;
                value[dst_start..dst_start + e * inner].copy_from_slice(src);
            }
            offset += e;
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| self.track(p)).collect();
        Ok(self.push(out_shape, value, ids, Rule::Concat { axis, extents }))
    }

    /// Sum or mean over the given axes (all elements when `axes` is `None`).
    /// Reduced axes are removed from the shape.
    pub fn reduce(
        &mut self,
        x: &Tensor,
        kind: ReduceKind,
        axes: Option<&[usize]>,
    ) -> Result<Tensor, TensorError> {
        let rank = x.rank();
        if let Some(list) = axes {
            for &a in list {
                if a >= rank {
                    return Err(TensorError::InvalidAxis { axis: a, rank });
                }
            }
        }
        let (out_shape, value) = match axes {
            None => {
                let s: f64 = x.data.iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / x.data.len() as f64,
                };
                (vec![1], vec![v])
            }
            Some(list) => {
                let mut reduced = vec![false; rank];
                for &a in list {
                    reduced[a] = true;
                }
                let out_shape: Vec<usize> = (0..rank)
                    .filter(|&d| !reduced[d])
                    .map(|d| x.shape[d])
                    .collect();
                let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
                let out_numel: usize = out_shape.iter().product();
                let mut value = vec![0.0; out_numel];
                let strides = row_major_strides(&x.shape);
                let out_strides = row_major_strides(&out_shape);
                for flat in 0..x.data.len() {
                    let mut rem = flat;
                    let mut out_flat = 0;
                    let mut oi = 0;
                    for d in 0..rank {
                        let c = rem / strides[d];
                        rem %= strides[d];
                        if !reduced[d] {
                            out_flat += c * out_strides[oi];
                            oi += 1;
                        }
                    }
                    value[out_flat] += x.data[flat];
                }
                if kind == ReduceKind::Mean {
                    let count: usize = list.iter().map(|&a| x.shape[a]).product();
                    for v in value.iter_mut() {
                        *v /= count as f64;
                    }
                }
                (out_shape, value)
            }
        };
        let xid = self.track(x);
        Ok(self.push(
            out_shape,
            value,
            vec![xid],
            Rule::Reduce { kind, axes: axes.map(|a| a.to_vec()), input_shape: x.shape.clone() },
        ))
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        self.reduce(x, ReduceKind::Sum, None).expect("axes=None cannot fail")
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        self.reduce(x, ReduceKind::Mean, None).expect("axes=None cannot fail")
    }

    /// Select index `index` along `axis`, removing that axis.
    pub fn index_axis(&mut self, x: &Tensor, axis: usize, index: usize) -> Result<Tensor, TensorError> {
        let rank = x.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        if index >= x.shape[axis] {
            return Err(TensorError::IndexOutOfBounds { axis, index, len: x.shape[axis] });
        }
        let outer: usize = x.shape[..axis].iter().product();
        let len = x.shape[axis];
        let inner: usize = x.shape[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            value.extend_from_slice(&x.data[start..start + inner]);
        }
        let mut out_shape = x.shape.clone();
        out_shape.remove(axis);
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let xid = self.track(x);
        Ok(self.push(
            out_shape,
            value,
            vec![xid],
            Rule::IndexAxis { axis, index, input_shape: x.shape.clone() },
        ))
    }

    pub fn reshape(&mut self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor, TensorError> {
        let expected: usize = new_shape.iter().product();
        if expected != x.data.len() {
            return Err(TensorError::DataLength { expected, got: x.data.len() });
        }
        let xid = self.track(x);
        Ok(self.push(
            new_shape.to_vec(),
            x.data.clone(),
            vec![xid],
            Rule::Reshape { input_shape: x.shape.clone() },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape and returns the
    /// gradients of all requires-grad leaves that the loss depends on.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let loss_id = match loss.node {
            Some((tape_id, id)) if tape_id == self.id => id,
            _ => return Err(TensorError::DetachedTensor),
        };
        if !loss.is_scalar() {
            return Err(TensorError::NotScalar { shape: loss.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss_id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.rule {
                Rule::Leaf => {
                    out.by_node.insert(
                        id,
                        Tensor { shape: node.shape.clone(), data: g, node: None },
                    );
                }
                rule => {
                    let parent_grads = self.rule_backward(rule, node, &g);
                    for (pid, pg) in node.parents.iter().zip(parent_grads) {
                        if !self.nodes[*pid].requires_grad {
                            continue;
                        }
                        match &mut grads[*pid] {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a += b;
                                }
                            }
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients flowing to each parent of `node`, given upstream gradient `g`.
    fn rule_backward(&self, rule: &Rule, node: &Node, g: &[f64]) -> Vec<Vec<f64>> {
        match rule {
            Rule::Leaf => unreachable!("leaf handled by caller"),
            Rule::Unary(op) => {
                let x = &self.nodes[node.parents[0]].value;
                let y = &node.value;
                let dx: Vec<f64> = match op {
                    UnaryOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                    UnaryOp::Sigmoid => g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect(),
                    UnaryOp::Tanh => g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect(),
                    UnaryOp::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            if xv > 0.0 {
                                gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    UnaryOp::Neg => g.iter().map(|&gv| -gv).collect(),
                };
                vec![dx]
            }
            Rule::Binary(op) => {
                let a = &self.nodes[node.parents[0]].value;
                let b = &self.nodes[node.parents[1]].value;
                let bn = b.len();
                let da: Vec<f64> = match op {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * b[i % bn])
                        .collect(),
                };
                let mut db_full: Vec<f64> = match op {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.iter().map(|&gv| -gv).collect(),
                    BinaryOp::Mul => g.iter().zip(a).map(|(&gv, &av)| gv * av).collect(),
                };
                // Sum the broadcast axes back down to the rhs shape.
                if bn != db_full.len() {
                    let mut db = vec![0.0; bn];
                    for (i, v) in db_full.drain(..).enumerate() {
                        db[i % bn] += v;
                    }
                    vec![da, db]
                } else {
                    vec![da, db_full]
                }
            }
            Rule::Matmul => {
                let a = &self.nodes[node.parents[0]];
                let b = &self.nodes[node.parents[1]];
                let k = b.shape[0];
                let n = b.shape[1];
                let rows = a.value.len() / k;
                // dA = dC . B^T ; dB = A^T . dC
                let bt = transpose_raw(&b.value, k, n);
                let da = matmul_raw(g, &bt, rows, n, k);
                let at = transpose_raw(&a.value, rows, k);
                let db = matmul_raw(&at, g, k, rows, n);
                vec![da, db]
            }
            Rule::BatchMatmul => {
                let a = &self.nodes[node.parents[0]];
                let b = &self.nodes[node.parents[1]];
                let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
                let n = b.shape[2];
                let mut da = vec![0.0; a.value.len()];
                let mut db = vec![0.0; b.value.len()];
                for bi in 0..batch {
                    let av = &a.value[bi * m * k..(bi + 1) * m * k];
                    let bv = &b.value[bi * k * n..(bi + 1) * k * n];
                    let gv = &g[bi * m * n..(bi + 1) * m * n];
                    let bt = transpose_raw(bv, k, n);
                    matmul_into(gv, &bt, m, n, k, &mut da[bi * m * k..(bi + 1) * m * k]);
                    let at = transpose_raw(av, m, k);
                    matmul_into(&at, gv, k, m, n, &mut db[bi * k * n..(bi + 1) * k * n]);
                }
                vec![da, db]
            }
            Rule::Transpose => {
                let (n, m) = (node.shape[0], node.shape[1]);
                vec![transpose_raw(g, n, m)]
            }
            Rule::SoftmaxRows => {
                let y = &node.value;
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut dx = vec![0.0; y.len()];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![dx]
            }
            Rule::Concat { axis, extents } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let total_axis = node.shape[*axis];
                let mut result = Vec::with_capacity(extents.len());
                let mut offset = 0;
                for &e in extents {
                    let mut pg = vec![0.0; outer * e * inner];
                    for o in 0..outer {
                        let src_start = (o * total_axis + offset) * inner;
                        pg[o * e * inner..(o + 1) * e * inner]
                            .copy_from_slice(&g[src_start..src_start + e * inner]);
                    }
                    result.push(pg);
                    offset += e;
                }
                result
            }
            Rule::Reduce { kind, axes, input_shape } => {
                let in_numel: usize = input_shape.iter().product();
                let dx = match axes {
                    None => {
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / in_numel as f64,
                        };
                        vec![g[0] * scale; in_numel]
                    }
                    Some(list) => {
                        let rank = input_shape.len();
                        let mut reduced = vec![false; rank];
                        for &a in list {
                            reduced[a] = true;
                        }
                        let count: usize = list.iter().map(|&a| input_shape[a]).product();
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / count as f64,
                        };
                        let strides = row_major_strides(input_shape);
                        let out_shape: Vec<usize> = (0..rank)
                            .filter(|&d| !reduced[d])
                            .map(|d| input_shape[d])
                            .collect();
                        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
                        let out_strides = row_major_strides(&out_shape);
                        let mut dx = vec![0.0; in_numel];
                        for (flat, slot) in dx.iter_mut().enumerate() {
                            let mut rem = flat;
                            let mut out_flat = 0;
                            let mut oi = 0;
                            for d in 0..rank {
                                let c = rem / strides[d];
                                rem %= strides[d];
                                if !reduced[d] {
                                    out_flat += c * out_strides[oi];
                                    oi += 1;
                                }
                            }
                            *slot = g[out_flat] * scale;
                        }
                        dx
                    }
                };
                vec![dx]
            }
            Rule::IndexAxis { axis, index, input_shape } => {
                let outer: usize = input_shape[..*axis].iter().product();
                let len = input_shape[*axis];
                let inner: usize = input_shape[*axis + 1..].iter().product();
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + index) * inner;
                    dx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                vec![dx]
            }
            Rule::Reshape { input_shape } => {
                let _ = input_shape;
                vec![g.to_vec()]
            }
        }
    }

    /// Test hook: overwrite the rule of the node that produced `t` so a
    /// deliberately wrong backward pass can be detected by gradient checks.
    #[cfg(test)]
    pub(crate) fn corrupt_rule_for_test(&mut self, t: &Tensor) {
        if let Some((tape_id, id)) = t.node {
            if tape_id == self.id {
                self.nodes[id].rule = Rule::Unary(UnaryOp::Sigmoid);
            }
        }
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return true;
    }
    // Trailing-suffix broadcast: b's shape must equal the tail of a's shape.
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_into(a, b, m, k, n, &mut c);
    c
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Maximum relative disagreement between the analytic gradient of `f` at `x`
/// and central finite differences with step `eps`.
///
/// `f` must build its computation on the tape it is given and return a scalar.
/// The error at each coordinate is
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x, true);
    let loss = f(&mut tape, &leaf)?;
    if !loss.is_scalar() {
        return Err(TensorError::NotScalar { shape: loss.shape().to_vec() });
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .get(&leaf)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let leaf = t.leaf(probe, false);
        Ok(f(&mut t, &leaf)?.item())
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-12);
        let err = (analytic[i] - numeric).abs() / denom;
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![data.len()], data.to_vec()).unwrap()
    }

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
        }
    }

    #[test]
    fn relu_at_boundary() {
        let mut tape = Tape::new();
        let y = tape.relu(&t1(&[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_and_tanh_at_origin() {
        let mut tape = Tape::new();
        let s = tape.sigmoid(&t1(&[0.0]));
        let th = tape.tanh(&t1(&[0.0]));
        assert_eq!(s.data(), &[0.5]);
        assert_eq!(th.data(), &[0.0]);
    }

    #[test]
    fn binary_identities_and_hand_case() {
        let mut tape = Tape::new();
        let sum = tape.add(&t1(&[1.0, 2.0]), &t1(&[0.0, 0.0])).unwrap();
        assert_eq!(sum.data(), &[1.0, 2.0]);
        let prod = tape.mul_scalar(&t1(&[3.0, 4.0]), 1.0).unwrap();
        assert_eq!(prod.data(), &[3.0, 4.0]);
        let diff = tape.sub(&t1(&[5.0, 5.0]), &t1(&[2.0, 3.0])).unwrap();
        assert_eq!(diff.data(), &[3.0, 2.0]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut tape = Tape::new();
        let err = tape.add(&t1(&[1.0, 2.0]), &t1(&[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn suffix_broadcast_add() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t1(&[10.0, 20.0, 30.0]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut tape = Tape::new();
        let eye = t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = t2(3, 3, &[2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]);
        let im = tape.matmul(&eye, &m).unwrap();
        assert_eq!(im.data(), m.data());

        let a = t2(1, 1, &[2.0]);
        let b = t2(1, 1, &[3.0]);
        assert_eq!(tape.matmul(&a, &b).unwrap().data(), &[6.0]);

        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(tape.matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2, 1], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.bmm(&a, &b).unwrap();
        // batch 0: [1,2].[5,6] = 17 ; batch 1: [3,4].[7,8] = 53
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[17.0, 53.0]);
    }

    #[test]
    fn softmax_rows_cases() {
        let mut tape = Tape::new();
        let u = tape.softmax_rows(&t2(1, 3, &[0.0, 0.0, 0.0])).unwrap();
        assert_close(u.data(), &[1.0 / 3.0; 3], 1e-15);

        // Shift invariance is exact thanks to row-max subtraction (dyadic
        // values keep the subtraction itself exact).
        let shifted = tape.softmax_rows(&t2(1, 2, &[5.0, 5.75])).unwrap();
        let base = tape.softmax_rows(&t2(1, 2, &[0.0, 0.75])).unwrap();
        assert_eq!(shifted.data(), base.data());

        let q = tape.softmax_rows(&t2(1, 2, &[0.0, 3.0f64.ln()])).unwrap();
        assert_close(q.data(), &[0.25, 0.75], 1e-15);
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let single = tape.concat(&[&a], 0).unwrap();
        assert_eq!(single.data(), a.data());

        let b = t2(2, 3, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let wide = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(wide.shape(), &[2, 6]);
        assert_eq!(wide.data(), &[1.0, 2.0, 3.0, 7.0, 8.0, 9.0, 4.0, 5.0, 6.0, 10.0, 11.0, 12.0]);

        let p = t2(1, 1, &[1.0]);
        let q = t2(1, 1, &[2.0]);
        let stacked = tape.concat(&[&p, &q], 0).unwrap();
        assert_eq!(stacked.shape(), &[2, 1]);
        assert_eq!(stacked.data(), &[1.0, 2.0]);
    }

    #[test]
    fn reduce_cases() {
        let mut tape = Tape::new();
        let s = tape.sum_all(&t1(&[1.0, 2.0, 3.0]));
        assert_eq!(s.item(), 6.0);
        let m = tape.mean_all(&t1(&[4.2, 4.2, 4.2, 4.2]));
        assert!((m.item() - 4.2).abs() < 1e-15);
        assert!(matches!(
            tape.reduce(&t1(&[1.0]), ReduceKind::Sum, Some(&[3])),
            Err(TensorError::InvalidAxis { axis: 3, rank: 1 })
        ));
    }

    #[test]
    fn reduce_axes_sum_and_mean() {
        let mut tape = Tape::new();
        let x = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cols = tape.reduce(&x, ReduceKind::Sum, Some(&[0])).unwrap();
        assert_eq!(cols.shape(), &[3]);
        assert_eq!(cols.data(), &[5.0, 7.0, 9.0]);
        let rows = tape.reduce(&x, ReduceKind::Mean, Some(&[1])).unwrap();
        assert_eq!(rows.data(), &[2.0, 5.0]);
    }

    #[test]
    fn mean_backward_divides_by_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[2.0, 4.0]), true);
        let loss = tape.mean_all(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, -2.0]), true);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_dead_relu() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[-1.0]), true);
        let y = tape.relu(&x);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_and_attached_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t1(&[1.0, 2.0]), true);
        let y = tape.relu(&x);
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));

        let tape2 = Tape::new();
        let detached = Tensor::scalar(1.0);
        assert!(matches!(tape2.backward(&detached), Err(TensorError::DetachedTensor)));
    }

    #[test]
    fn backward_of_matmul_chain_matches_finite_differences() {
        let x = t2(2, 3, &[0.3, -0.7, 1.2, 0.05, 0.9, -1.4]);
        let w = t2(3, 2, &[0.2, -0.4, 0.6, 0.1, -0.9, 0.5]);
        let err = finite_diff_check(
            |tape, leaf| {
                let h = tape.matmul(leaf, &w)?;
                let h = tape.tanh(&h);
                let sq = tape.mul(&h, &h)?;
                Ok(tape.sum_all(&sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn finite_diff_on_quadratic_and_linear() {
        let x = t1(&[1.0, 2.0, 3.0]);
        let quad = finite_diff_check(
            |tape, leaf| {
                let sq = tape.mul(leaf, leaf)?;
                Ok(tape.sum_all(&sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(quad < 1e-8, "quadratic err {quad}");

        // A dyadic step keeps the linear difference quotient exact.
        let lin = finite_diff_check(
            |tape, leaf| {
                let scaled = tape.mul_scalar(leaf, 3.5)?;
                Ok(tape.sum_all(&scaled))
            },
            &x,
            2f64.powi(-20),
        )
        .unwrap();
        assert!(lin < 1e-10, "linear err {lin}");
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        // Swapping the relu rule for a sigmoid rule must blow the check up.
        let x = t1(&[0.6, 1.3, 2.0]);
        let mut tape = Tape::new();
        let leaf = tape.leaf(&x, true);
        let y = tape.relu(&leaf);
        tape.corrupt_rule_for_test(&y);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get(&leaf).unwrap().data().to_vec();
        // Honest relu gradient here is all-ones; the corrupted rule is not.
        let bad = analytic.iter().any(|&g| (g - 1.0).abs() > 1e-3);
        assert!(bad, "corrupted rule produced the correct gradient: {analytic:?}");
    }

    #[test]
    fn independent_subgraphs_backward_jointly_equals_separately() {
        let xa = t1(&[0.4, -1.1]);
        let xb = t1(&[2.0, 0.3, -0.6]);

        let mut joint = Tape::new();
        let la = joint.leaf(&xa, true);
        let lb = joint.leaf(&xb, true);
        let sa = joint.mul(&la, &la).unwrap();
        let sb = joint.tanh(&lb);
        let ta = joint.sum_all(&sa);
        let tb = joint.sum_all(&sb);
        let total = joint.add(&ta, &tb).unwrap();
        let grads = joint.backward(&total).unwrap();
        let ga = grads.get(&la).unwrap().data().to_vec();
        let gb = grads.get(&lb).unwrap().data().to_vec();

        let mut only_a = Tape::new();
        let la2 = only_a.leaf(&xa, true);
        let sa2 = only_a.mul(&la2, &la2).unwrap();
        let ta2 = only_a.sum_all(&sa2);
        let ga2 = only_a.backward(&ta2).unwrap().get(&la2).unwrap().data().to_vec();

        let mut only_b = Tape::new();
        let lb2 = only_b.leaf(&xb, true);
        let sb2 = only_b.tanh(&lb2);
        let tb2 = only_b.sum_all(&sb2);
        let gb2 = only_b.backward(&tb2).unwrap().get(&lb2).unwrap().data().to_vec();

        assert_eq!(ga, ga2);
        assert_eq!(gb, gb2);
    }

    #[test]
    fn index_axis_selects_time_slice() {
        let mut tape = Tape::new();
        // 2 x 3 x 2
        let x = Tensor::from_vec(
            vec![2, 3, 2],
            (0..12).map(|v| v as f64).collect(),
        )
        .unwrap();
        let s = tape.index_axis(&x, 1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grad_of_each_op_matches_finite_differences(
            data in proptest::collection::vec(-2.0f64..2.0, 6),
            other in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let x = t2(2, 3, &data);
            let rhs = t2(2, 3, &other);
            let checks: Vec<(&str, Box<dyn Fn(&mut Tape, &Tensor) -> Result<Tensor, TensorError>>)> = vec![
                ("sigmoid", Box::new(|t: &mut Tape, l: &Tensor| { let y = t.sigmoid(l); Ok(t.sum_all(&y)) })),
                ("tanh", Box::new(|t: &mut Tape, l: &Tensor| { let y = t.tanh(l); Ok(t.sum_all(&y)) })),
                ("neg", Box::new(|t: &mut Tape, l: &Tensor| { let y = t.neg(l); Ok(t.sum_all(&y)) })),
                ("mul", Box::new(move |t: &mut Tape, l: &Tensor| { let y = t.mul(l, &rhs)?; Ok(t.sum_all(&y)) })),
                ("softmax", Box::new(|t: &mut Tape, l: &Tensor| { let y = t.softmax_rows(l)?; let sq = t.mul(&y, &y)?; Ok(t.sum_all(&sq)) })),
                ("concat", Box::new(|t: &mut Tape, l: &Tensor| {
                    let doubled = t.concat(&[l, l], 1)?;
                    let y = t.tanh(&doubled);
                    Ok(t.sum_all(&y))
                })),
                ("transpose", Box::new(|t: &mut Tape, l: &Tensor| {
                    let tr = t.transpose(l)?;
                    let sq = t.mul(&tr, &tr)?;
                    Ok(t.mean_all(&sq))
                })),
                ("reduce_axis", Box::new(|t: &mut Tape, l: &Tensor| {
                    let cols = t.reduce(l, ReduceKind::Mean, Some(&[0]))?;
                    let sq = t.mul(&cols, &cols)?;
                    Ok(t.sum_all(&sq))
                })),
            ];
            for (name, f) in checks {
                let err = finite_diff_check(f.as_ref(), &x, 1e-6).unwrap();
                prop_assert!(err < 1e-5, "{name}: rel err {err}");
            }
        }

        #[test]
        fn softmax_rows_are_stochastic_and_shift_invariant(
            data in proptest::collection::vec(-50.0f64..50.0, 8),
            shift in -10.0f64..10.0,
        ) {
            let x = t2(2, 4, &data);
            let mut tape = Tape::new();
            let y = tape.softmax_rows(&x).unwrap();
            for row in 0..2 {
                let s: f64 = y.data()[row * 4..(row + 1) * 4].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(y.data()[row * 4..(row + 1) * 4].iter().all(|&v| v >= 0.0));
            }
            let shifted_data: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let ys = tape.softmax_rows(&t2(2, 4, &shifted_data)).unwrap();
            for (a, b) in y.data().iter().zip(ys.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn ops_do_not_mutate_inputs(
            data in proptest::collection::vec(-2.0f64..2.0, 6),
            other in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let a = t2(2, 3, &data);
            let b = t2(2, 3, &other);
            let a_before = a.data().to_vec();
            let b_before = b.data().to_vec();
            let mut tape = Tape::new();
            let _ = tape.relu(&a);
            let _ = tape.add(&a, &b).unwrap();
            let _ = tape.mul(&a, &b).unwrap();
            let bt = tape.transpose(&b).unwrap();
            let _ = tape.matmul(&a, &bt).unwrap();
            let _ = tape.softmax_rows(&a).unwrap();
            let _ = tape.concat(&[&a, &b], 0).unwrap();
            prop_assert_eq!(a.data(), &a_before[..]);
            prop_assert_eq!(b.data(), &b_before[..]);
        }

        #[test]
        fn finite_inputs_produce_finite_outputs(
            data in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let x = t2(2, 3, &data);
            let mut tape = Tape::new();
            let a = tape.sigmoid(&x);
            let b = tape.softmax_rows(&a).unwrap();
            let xt = tape.transpose(&x).unwrap();
            let c = tape.matmul(&b, &xt).unwrap();
            prop_assert!(c.is_finite());
        }
    }
}
