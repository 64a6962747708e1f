//! Reverse-mode differentiation over a flat tape of eagerly evaluated nodes.
//!
//! A `Graph` is built once per loss evaluation: forward methods append nodes
//! (values computed immediately), `backward` walks the tape in reverse and
//! accumulates gradients, and `grads_into` adds the gradients of parameter
//! nodes back into a [`ParameterSet`]. The op set is exactly what the model
//! needs; this is not a general tensor compiler.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::params::ParameterSet;
use crate::scalar::{cast, Scalar};
use crate::tensor::TensorBuffer;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Derivative expressed in terms of the activation output.
    fn grad_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatVec { w: NodeId, x: NodeId },
    Unary { x: NodeId, kind: Activation },
    Softmax { x: NodeId },
    CrossEntropy { logits: NodeId, label: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
    Dot { a: NodeId, b: NodeId },
    Concat { xs: Vec<NodeId> },
    Slice { x: NodeId, start: usize },
    WeightedSum { items: Vec<NodeId>, weights: NodeId },
    SumVecs { xs: Vec<NodeId> },
    Conv3x3 { x: NodeId, kernel: NodeId, bias: NodeId },
    AvgPool2 { x: NodeId },
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    op: Op<T>,
}

/// Tape of nodes for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_ids: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_ids: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].grad
    }

    /// Value of a single-element node.
    pub fn value_scalar(&self, id: NodeId) -> T {
        assert_eq!(self.nodes[id.0].values.len(), 1, "node is not a scalar");
        self.nodes[id.0].values[0]
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> TensorBuffer<T> {
        TensorBuffer::from_values(&self.nodes[id.0].shape, self.nodes[id.0].values.clone())
            .expect("graph node holds a valid tensor")
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, name: &'static str) -> Result<NodeId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite { op: name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let grad = vec![T::zero(); values.len()];
        self.nodes.push(Node {
            shape,
            values,
            grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input node.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>) -> Result<NodeId> {
        if shape.is_empty() || shape.iter().product::<usize>() != values.len() {
            return Err(NumError::ShapeMismatch {
                op: "leaf",
                details: format!("shape {shape:?} vs {} values", values.len()),
            });
        }
        self.push(shape.to_vec(), values, Op::Leaf, "leaf")
    }

    /// All-zero input node (initial recurrent states).
    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        let len = shape.iter().product();
        self.push(shape.to_vec(), vec![T::zero(); len], Op::Leaf, "zeros")
            .expect("zeros are finite")
    }

    /// Scalar constant node of shape `[1]`.
    pub fn constant(&mut self, v: T) -> Result<NodeId> {
        self.push(vec![1], vec![v], Op::Leaf, "constant")
    }

    /// Inserts (or reuses) the node mirroring a named parameter. Each
    /// parameter appears at most once per graph, so gradients from every use
    /// accumulate in one place.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let t = params.require(name)?;
        let id = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, "param")?;
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds each parameter node's gradient into the parameter set.
    pub fn grads_into(&self, params: &mut ParameterSet<T>) -> Result<()> {
        for (name, &id) in &self.param_ids {
            let node = &self.nodes[id.0];
            let t = params.require_mut(name)?;
            for (pg, ng) in t.grad_mut().iter_mut().zip(&node.grad) {
                *pg = *pg + *ng;
            }
        }
        Ok(())
    }

    /// `w · x + b` with `w: [m, k]` row-major, `x: [k]`, `b: [m]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let ws = self.shape(w);
        let (m, k) = match ws {
            [m, k] => (*m, *k),
            _ => {
                return Err(NumError::ShapeMismatch {
                    op: "affine",
                    details: format!("weights must be rank 2, got {ws:?}"),
                })
            }
        };
        if self.shape(x) != [k] || self.shape(b) != [m] {
            return Err(NumError::ShapeMismatch {
                op: "affine",
                details: format!(
                    "weights [{m}, {k}] need input [{k}] and bias [{m}], got input {:?} and bias {:?}",
                    self.shape(x),
                    self.shape(b)
                ),
            });
        }
        let mut out = self.nodes[b.0].values.clone();
        for i in 0..m {
            let mut acc = out[i];
            let row = &self.nodes[w.0].values[i * k..(i + 1) * k];
            for (wv, xv) in row.iter().zip(&self.nodes[x.0].values) {
                acc = acc + *wv * *xv;
            }
            out[i] = acc;
        }
        self.push(vec![m], out, Op::Affine { x, w, b }, "affine")
    }

    /// `w · x` without bias, `w: [m, k]`, `x: [k]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.shape(w);
        let (m, k) = match ws {
            [m, k] => (*m, *k),
            _ => {
                return Err(NumError::ShapeMismatch {
                    op: "matvec",
                    details: format!("weights must be rank 2, got {ws:?}"),
                })
            }
        };
        if self.shape(x) != [k] {
            return Err(NumError::ShapeMismatch {
                op: "matvec",
                details: format!("weights [{m}, {k}] need input [{k}], got {:?}", self.shape(x)),
            });
        }
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let row = &self.nodes[w.0].values[i * k..(i + 1) * k];
            let mut acc = T::zero();
            for (wv, xv) in row.iter().zip(&self.nodes[x.0].values) {
                acc = acc + *wv * *xv;
            }
            out[i] = acc;
        }
        self.push(vec![m], out, Op::MatVec { w, x }, "matvec")
    }

    /// Elementwise activation of any shape.
    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let values: Vec<T> = self.nodes[x.0].values.iter().map(|&v| kind.apply(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, Op::Unary { x, kind }, "activation")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    /// Max-subtracted softmax over a rank-1 node.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 1 || xs.values.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "softmax",
                details: format!("need a non-empty rank-1 input, got {:?}", xs.shape),
            });
        }
        let max = xs
            .values
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let exps: Vec<T> = xs.values.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
        let out: Vec<T> = exps.iter().map(|&e| e / sum).collect();
        let shape = xs.shape.clone();
        self.push(shape, out, Op::Softmax { x }, "softmax")
    }

    /// `-log(softmax(logits)[label])`, computed via a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let node = &self.nodes[logits.0];
        if node.shape.len() != 1 {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                details: format!("logits must be rank 1, got {:?}", node.shape),
            });
        }
        let classes = node.values.len();
        if label >= classes {
            return Err(NumError::LabelOutOfRange { label, classes });
        }
        let max = node
            .values
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let sum = node
            .values
            .iter()
            .fold(T::zero(), |a, &v| a + (v - max).exp());
        let loss = max + sum.ln() - node.values[label];
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits, label }, "cross_entropy")
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
    ) -> Result<(Vec<usize>, usize)> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NumError::ShapeMismatch {
                op: name,
                details: format!(
                    "operands {:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok((self.nodes[a.0].shape.clone(), self.nodes[a.0].values.len()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.binary_same_shape(a, b, "add")?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.nodes[a.0].values[i] + self.nodes[b.0].values[i]);
        }
        self.push(shape, out, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.binary_same_shape(a, b, "sub")?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.nodes[a.0].values[i] - self.nodes[b.0].values[i]);
        }
        self.push(shape, out, Op::Sub { a, b }, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, n) = self.binary_same_shape(a, b, "mul")?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(self.nodes[a.0].values[i] * self.nodes[b.0].values[i]);
        }
        self.push(shape, out, Op::Mul { a, b }, "mul")
    }

    /// Multiplication by a fixed (non-differentiated) scalar.
    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let values: Vec<T> = self.nodes[x.0].values.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, Op::Scale { x, factor }, "scale")
    }

    /// Inner product of two rank-1 nodes, yielding a `[1]` node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, n) = self.binary_same_shape(a, b, "dot")?;
        let mut acc = T::zero();
        for i in 0..n {
            acc = acc + self.nodes[a.0].values[i] * self.nodes[b.0].values[i];
        }
        self.push(vec![1], vec![acc], Op::Dot { a, b }, "dot")
    }

    /// Concatenation of rank-1 nodes.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "concat",
                details: "no inputs".to_string(),
            });
        }
        let mut out = Vec::new();
        for &x in xs {
            if self.nodes[x.0].shape.len() != 1 {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    details: format!("inputs must be rank 1, got {:?}", self.nodes[x.0].shape),
                });
            }
            out.extend_from_slice(&self.nodes[x.0].values);
        }
        let len = out.len();
        self.push(vec![len], out, Op::Concat { xs: xs.to_vec() }, "concat")
    }

    /// Rank-1 window `[start, start + len)` over a node's flat values.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let total = self.nodes[x.0].values.len();
        if len == 0 || start + len > total {
            return Err(NumError::ShapeMismatch {
                op: "slice",
                details: format!("window [{start}, {start}+{len}) out of range for {total} values"),
            });
        }
        let values = self.nodes[x.0].values[start..start + len].to_vec();
        self.push(vec![len], values, Op::Slice { x, start }, "slice")
    }

    /// `sum_i weights[i] * items[i]` with `weights: [n]` and `n` same-shape
    /// rank-1 items. Differentiates through both the items and the weights.
    pub fn weighted_sum(&mut self, items: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let n = items.len();
        if self.shape(weights) != [n] || n == 0 {
            return Err(NumError::ShapeMismatch {
                op: "weighted_sum",
                details: format!("{n} items vs weights {:?}", self.shape(weights)),
            });
        }
        let dim = self.nodes[items[0].0].values.len();
        for &it in items {
            if self.nodes[it.0].shape != self.nodes[items[0].0].shape {
                return Err(NumError::ShapeMismatch {
                    op: "weighted_sum",
                    details: "items must share one shape".to_string(),
                });
            }
        }
        let mut out = vec![T::zero(); dim];
        for (i, &it) in items.iter().enumerate() {
            let wi = self.nodes[weights.0].values[i];
            for (o, &v) in out.iter_mut().zip(&self.nodes[it.0].values) {
                *o = *o + wi * v;
            }
        }
        let shape = self.nodes[items[0].0].shape.clone();
        self.push(
            shape,
            out,
            Op::WeightedSum {
                items: items.to_vec(),
                weights,
            },
            "weighted_sum",
        )
    }

    /// Elementwise sum of same-shape nodes.
    pub fn sum_vecs(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(NumError::ShapeMismatch {
                op: "sum_vecs",
                details: "no inputs".to_string(),
            });
        }
        for &x in xs {
            if self.nodes[x.0].shape != self.nodes[xs[0].0].shape {
                return Err(NumError::ShapeMismatch {
                    op: "sum_vecs",
                    details: "inputs must share one shape".to_string(),
                });
            }
        }
        let mut out = self.nodes[xs[0].0].values.clone();
        for &x in &xs[1..] {
            for (o, &v) in out.iter_mut().zip(&self.nodes[x.0].values) {
                *o = *o + v;
            }
        }
        let shape = self.nodes[xs[0].0].shape.clone();
        self.push(shape, out, Op::SumVecs { xs: xs.to_vec() }, "sum_vecs")
    }

    /// Arithmetic mean of same-shape nodes.
    pub fn mean_vecs(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let s = self.sum_vecs(xs)?;
        self.scale(s, T::one() / cast::<T>(xs.len() as f64))
    }

    /// 3x3 convolution with zero padding 1 and stride 1 over an `[H, W, C]`
    /// node. Kernel is `[c_out, 3, 3, c_in]`, bias `[c_out]`.
    pub fn conv3x3(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (h, w, c_in) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "conv3x3",
                    details: format!("input must be [H, W, C], got {s:?}"),
                })
            }
        };
        let c_out = match self.shape(kernel) {
            [o, 3, 3, i] if *i == c_in => *o,
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "conv3x3",
                    details: format!("kernel must be [c_out, 3, 3, {c_in}], got {s:?}"),
                })
            }
        };
        if self.shape(bias) != [c_out] {
            return Err(NumError::ShapeMismatch {
                op: "conv3x3",
                details: format!("bias must be [{c_out}], got {:?}", self.shape(bias)),
            });
        }
        let mut out = vec![T::zero(); h * w * c_out];
        for oh in 0..h {
            for ow in 0..w {
                for oc in 0..c_out {
                    let mut acc = self.nodes[bias.0].values[oc];
                    for kh in 0..3usize {
                        for kw in 0..3usize {
                            let ih = oh as isize + kh as isize - 1;
                            let iw = ow as isize + kw as isize - 1;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            let xbase = ((ih as usize) * w + iw as usize) * c_in;
                            let kbase = ((oc * 3 + kh) * 3 + kw) * c_in;
                            for ci in 0..c_in {
                                acc = acc
                                    + self.nodes[x.0].values[xbase + ci]
                                        * self.nodes[kernel.0].values[kbase + ci];
                            }
                        }
                    }
                    out[(oh * w + ow) * c_out + oc] = acc;
                }
            }
        }
        self.push(vec![h, w, c_out], out, Op::Conv3x3 { x, kernel, bias }, "conv3x3")
    }

    /// 2x2 average pooling with stride 2 over an `[H, W, C]` node; H and W
    /// must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = match self.shape(x) {
            [h, w, c] if h % 2 == 0 && w % 2 == 0 => (*h, *w, *c),
            s => {
                return Err(NumError::ShapeMismatch {
                    op: "avg_pool2",
                    details: format!("input must be [H, W, C] with even H and W, got {s:?}"),
                })
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let quarter = cast::<T>(0.25);
        let mut out = vec![T::zero(); oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut acc = T::zero();
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc = acc + self.nodes[x.0].values[((2 * i + di) * w + 2 * j + dj) * c + ch];
                        }
                    }
                    out[(i * ow + j) * c + ch] = acc * quarter;
                }
            }
        }
        self.push(vec![oh, ow, c], out, Op::AvgPool2 { x }, "avg_pool2")
    }

    /// Reverse pass from a scalar loss node; gradients accumulate in the
    /// nodes and can be harvested with [`Graph::grad`] or
    /// [`Graph::grads_into`]. One backward pass per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(NumError::ShapeMismatch {
                op: "backward",
                details: format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            });
        }
        self.nodes[loss.0].grad[0] = self.nodes[loss.0].grad[0] + T::one();
        for id in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backward_node(id, &op);
            self.nodes[id].op = op;
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, op: &Op<T>) {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let g = self.nodes[id].grad.clone();
                let xv = self.nodes[x.0].values.clone();
                let wv = self.nodes[w.0].values.clone();
                let k = xv.len();
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[b.0].grad[i] = self.nodes[b.0].grad[i] + gi;
                    if gi == T::zero() {
                        continue;
                    }
                    for j in 0..k {
                        self.nodes[w.0].grad[i * k + j] =
                            self.nodes[w.0].grad[i * k + j] + gi * xv[j];
                        self.nodes[x.0].grad[j] = self.nodes[x.0].grad[j] + gi * wv[i * k + j];
                    }
                }
            }
            Op::MatVec { w, x } => {
                let g = self.nodes[id].grad.clone();
                let xv = self.nodes[x.0].values.clone();
                let wv = self.nodes[w.0].values.clone();
                let k = xv.len();
                for (i, &gi) in g.iter().enumerate() {
                    if gi == T::zero() {
                        continue;
                    }
                    for j in 0..k {
                        self.nodes[w.0].grad[i * k + j] =
                            self.nodes[w.0].grad[i * k + j] + gi * xv[j];
                        self.nodes[x.0].grad[j] = self.nodes[x.0].grad[j] + gi * wv[i * k + j];
                    }
                }
            }
            Op::Unary { x, kind } => {
                let n = self.nodes[id].values.len();
                for i in 0..n {
                    let y = self.nodes[id].values[i];
                    let gi = self.nodes[id].grad[i];
                    self.nodes[x.0].grad[i] =
                        self.nodes[x.0].grad[i] + gi * kind.grad_from_output(y);
                }
            }
            Op::Softmax { x } => {
                let y = self.nodes[id].values.clone();
                let g = self.nodes[id].grad.clone();
                let dot = y
                    .iter()
                    .zip(&g)
                    .fold(T::zero(), |acc, (&yi, &gi)| acc + yi * gi);
                for i in 0..y.len() {
                    self.nodes[x.0].grad[i] = self.nodes[x.0].grad[i] + y[i] * (g[i] - dot);
                }
            }
            Op::CrossEntropy { logits, label } => {
                let g0 = self.nodes[id].grad[0];
                let zv = self.nodes[logits.0].values.clone();
                let max = zv
                    .iter()
                    .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
                let sum = zv.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
                for (j, &zj) in zv.iter().enumerate() {
                    let p = (zj - max).exp() / sum;
                    let onehot = if j == *label { T::one() } else { T::zero() };
                    self.nodes[logits.0].grad[j] =
                        self.nodes[logits.0].grad[j] + g0 * (p - onehot);
                }
            }
            Op::Add { a, b } => {
                let g = self.nodes[id].grad.clone();
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[a.0].grad[i] = self.nodes[a.0].grad[i] + gi;
                }
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[b.0].grad[i] = self.nodes[b.0].grad[i] + gi;
                }
            }
            Op::Sub { a, b } => {
                let g = self.nodes[id].grad.clone();
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[a.0].grad[i] = self.nodes[a.0].grad[i] + gi;
                }
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[b.0].grad[i] = self.nodes[b.0].grad[i] - gi;
                }
            }
            Op::Mul { a, b } => {
                let g = self.nodes[id].grad.clone();
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[a.0].grad[i] = self.nodes[a.0].grad[i] + gi * bv[i];
                }
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[b.0].grad[i] = self.nodes[b.0].grad[i] + gi * av[i];
                }
            }
            Op::Scale { x, factor } => {
                let g = self.nodes[id].grad.clone();
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[x.0].grad[i] = self.nodes[x.0].grad[i] + gi * *factor;
                }
            }
            Op::Dot { a, b } => {
                let g0 = self.nodes[id].grad[0];
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                for i in 0..av.len() {
                    self.nodes[a.0].grad[i] = self.nodes[a.0].grad[i] + g0 * bv[i];
                }
                for i in 0..bv.len() {
                    self.nodes[b.0].grad[i] = self.nodes[b.0].grad[i] + g0 * av[i];
                }
            }
            Op::Concat { xs } => {
                let g = self.nodes[id].grad.clone();
                let mut offset = 0;
                for &x in xs {
                    let n = self.nodes[x.0].values.len();
                    for i in 0..n {
                        self.nodes[x.0].grad[i] = self.nodes[x.0].grad[i] + g[offset + i];
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                let g = self.nodes[id].grad.clone();
                for (i, &gi) in g.iter().enumerate() {
                    self.nodes[x.0].grad[start + i] = self.nodes[x.0].grad[start + i] + gi;
                }
            }
            Op::WeightedSum { items, weights } => {
                let g = self.nodes[id].grad.clone();
                for (i, &it) in items.iter().enumerate() {
                    let wi = self.nodes[weights.0].values[i];
                    let mut wgrad = T::zero();
                    for (j, &gj) in g.iter().enumerate() {
                        let v = self.nodes[it.0].values[j];
                        wgrad = wgrad + gj * v;
                        self.nodes[it.0].grad[j] = self.nodes[it.0].grad[j] + gj * wi;
                    }
                    self.nodes[weights.0].grad[i] = self.nodes[weights.0].grad[i] + wgrad;
                }
            }
            Op::SumVecs { xs } => {
                let g = self.nodes[id].grad.clone();
                for &x in xs {
                    for (i, &gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[i] = self.nodes[x.0].grad[i] + gi;
                    }
                }
            }
            Op::Conv3x3 { x, kernel, bias } => {
                let g = self.nodes[id].grad.clone();
                let (h, w, c_out) = match self.nodes[id].shape[..] {
                    [h, w, c] => (h, w, c),
                    _ => unreachable!(),
                };
                let c_in = self.nodes[x.0].shape[2];
                let xv = self.nodes[x.0].values.clone();
                let kv = self.nodes[kernel.0].values.clone();
                for oh in 0..h {
                    for ow in 0..w {
                        for oc in 0..c_out {
                            let go = g[(oh * w + ow) * c_out + oc];
                            if go == T::zero() {
                                continue;
                            }
                            self.nodes[bias.0].grad[oc] = self.nodes[bias.0].grad[oc] + go;
                            for kh in 0..3usize {
                                for kw in 0..3usize {
                                    let ih = oh as isize + kh as isize - 1;
                                    let iw = ow as isize + kw as isize - 1;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let xbase = ((ih as usize) * w + iw as usize) * c_in;
                                    let kbase = ((oc * 3 + kh) * 3 + kw) * c_in;
                                    for ci in 0..c_in {
                                        self.nodes[kernel.0].grad[kbase + ci] =
                                            self.nodes[kernel.0].grad[kbase + ci] + go * xv[xbase + ci];
                                        self.nodes[x.0].grad[xbase + ci] =
                                            self.nodes[x.0].grad[xbase + ci] + go * kv[kbase + ci];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let g = self.nodes[id].grad.clone();
                let (oh, ow, c) = match self.nodes[id].shape[..] {
                    [a, b, cc] => (a, b, cc),
                    _ => unreachable!(),
                };
                let w = ow * 2;
                let quarter = cast::<T>(0.25);
                for i in 0..oh {
                    for j in 0..ow {
                        for ch in 0..c {
                            let go = g[(i * ow + j) * c + ch] * quarter;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                                    self.nodes[x.0].grad[idx] = self.nodes[x.0].grad[idx] + go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = graph();
        let x = g.leaf(&[1], vec![0.0]).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.values(y), &[0.5]);
    }

    #[test]
    fn tanh_at_zero_is_zero() {
        let mut g = graph();
        let x = g.leaf(&[1], vec![0.0]).unwrap();
        let y = g.tanh(x).unwrap();
        assert_eq!(g.values(y), &[0.0]);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut g = graph();
        let x = g.leaf(&[2], vec![-1.5, 2.0]).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.values(y), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_inputs() {
        let mut g = graph();
        let x = g.leaf(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_element() {
        let mut g = graph();
        let x = g.leaf(&[1], vec![42.0]).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.values(y), &[1.0]);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut g = graph();
        let x = g.leaf(&[2], vec![1000.0, 0.0]).unwrap();
        let y = g.softmax(x).unwrap();
        let v = g.values(y);
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_positive() {
        let mut g = graph();
        let x = g
            .leaf(&[5], vec![-3.0, 0.2, 7.5, -0.1, 2.2])
            .unwrap();
        let y = g.softmax(x).unwrap();
        let sum: f64 = g.values(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(g.values(y).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut g = graph();
        let x = g.leaf(&[15], vec![0.0; 15]).unwrap();
        let l = g.cross_entropy(x, 3).unwrap();
        assert!((g.value_scalar(l) - (15.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_dominant_true_class_is_near_zero() {
        let mut g = graph();
        let x = g.leaf(&[4], vec![500.0, 0.0, 0.0, 0.0]).unwrap();
        let l = g.cross_entropy(x, 0).unwrap();
        assert!(g.value_scalar(l).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [0.3, -1.2, 2.5, 0.7];
        let label = 2usize;
        let mut g = graph();
        let x = g.leaf(&[4], logits.to_vec()).unwrap();
        let l = g.cross_entropy(x, label).unwrap();
        // independent route: -log(exp(z_y) / sum exp(z_k))
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        let expected = -(logits[label].exp() / denom).ln();
        assert!((g.value_scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = graph();
        let x = g.leaf(&[3], vec![0.0; 3]).unwrap();
        let err = g.cross_entropy(x, 3).unwrap_err();
        assert!(matches!(err, NumError::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn affine_shape_mismatch_names_operands() {
        let mut g = graph();
        let x = g.leaf(&[3], vec![0.0; 3]).unwrap();
        let w = g.leaf(&[2, 2], vec![0.0; 4]).unwrap();
        let b = g.leaf(&[2], vec![0.0; 2]).unwrap();
        let err = g.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("affine") && msg.contains("input"));
    }

    #[test]
    fn one_hot_weighted_sum_is_exact_selection() {
        let mut g = graph();
        let a = g.leaf(&[3], vec![0.1, -0.7, 3.3]).unwrap();
        let b = g.leaf(&[3], vec![9.0, 9.0, 9.0]).unwrap();
        let w = g.leaf(&[2], vec![1.0, 0.0]).unwrap();
        let y = g.weighted_sum(&[a, b], w).unwrap();
        assert_eq!(g.values(y), g.values(a));
    }

    #[test]
    fn backward_through_dot_is_linear() {
        let mut g = graph();
        let a = g.leaf(&[2], vec![2.0, 3.0]).unwrap();
        let b = g.leaf(&[2], vec![5.0, 7.0]).unwrap();
        let y = g.dot(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a), &[5.0, 7.0]);
        assert_eq!(g.grad(b), &[2.0, 3.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = graph();
        let a = g.leaf(&[1], vec![1e308]).unwrap();
        let err = g.add(a, a).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { .. }));
    }
}
