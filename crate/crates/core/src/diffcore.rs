//! Minimal dense-tensor computation graph with reverse-mode gradients.
//!
//! Graphs are eager: every op evaluates its output when it is recorded, so
//! the forward pass is simply the sequence of builder calls. [`Graph::backward`]
//! walks the recorded nodes in reverse insertion order (which is a valid
//! reverse topological order, since a node can only reference earlier nodes).
//!
//! Broadcasting is limited to trailing-dimension expansion: in `add`, `sub`
//! and `mul` the right operand's shape must equal the left operand's shape or
//! a suffix of it. Everything else is explicit.
//!
//! ```
//! use prosody_hvae::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(2.0));
//! let y = g.constant(Tensor::scalar(3.0));
//! let xy = g.mul(x, y).unwrap();
//! let grads = g.backward(xy).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensor shape {0:?} has a zero extent")]
    EmptyExtent(Vec<usize>),
    #[error("backward requires a scalar output of shape [1], got {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DiffError::EmptyExtent(shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(DiffError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a[m,k] · b[k,n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

/// `g[m,n] · b[k,n]ᵀ` → `[m,k]`
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[m,k]ᵀ · g[m,n]` → `[k,n]`
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
    c
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Unary(Unary, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(u, _) => match u {
                Unary::Neg => "neg",
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Softplus => "softplus",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Square => "square",
            },
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` when the node did not
    /// influence the output.
    pub fn get_or_zeros(&self, id: NodeId, like: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

/// A dynamically built computation graph.
///
/// `backward` has no side effects on the graph: each call returns a fresh
/// [`Gradients`] set, so calling it twice yields identical gradients rather
/// than doubled ones. Accumulation across graphs is the caller's job.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = mm(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor { shape: vec![m, n], data }, rg))
    }

    fn binary(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.check_broadcast(op.name(), a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let nb = vb.data.len();
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data[i % nb]))
            .collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    /// `a + b`, with `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product, with `b` broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), v, rg)
    }

    pub fn unary(&mut self, kind: Unary, a: NodeId) -> NodeId {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Square => |x| x * x,
        };
        let v = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(Op::Unary(kind, a), v, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Neg, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Softplus, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Log, a)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Square, a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = compensated_sum(&self.value(a).data);
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = compensated_sum(&v.data) / v.data.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Column sums of a matrix, shape `[cols]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("sum_rows")?;
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&v.data[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumRows(a), Tensor::vector(out), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("concat_cols: no inputs".into()));
        }
        let (rows, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor {
                shape: vec![rows, total],
                data,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("concat_rows: no inputs".into()));
        }
        let (_, cols) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: vec![r, c],
                });
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            rg,
        ))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(DiffError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::SliceCols(a, start),
            Tensor {
                shape: vec![r, len],
                data,
            },
            rg,
        ))
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(DiffError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: r,
            });
        }
        let data = self.value(a).data[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::SliceRows(a, start),
            Tensor {
                shape: vec![len, c],
                data,
            },
            rg,
        ))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("gather_rows")?;
        if index.is_empty() {
            return Err(DiffError::Invalid("gather_rows: empty index".into()));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(DiffError::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(&v.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::GatherRows(a, index.to_vec()),
            Tensor {
                shape: vec![index.len(), c],
                data,
            },
            rg,
        ))
    }

    /// `x · w + b` for `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// node that requires gradients.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape != [1] {
            return Err(DiffError::NotScalar(out.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces a broadcast gradient back to the right operand's shape.
    fn reduce_broadcast(&self, g: &Tensor, target: NodeId) -> Tensor {
        let shape = self.shape(target);
        let n = self.value(target).data.len();
        if n == g.data.len() {
            return Tensor {
                shape: shape.to_vec(),
                data: g.data.clone(),
            };
        }
        let mut out = vec![0.0; n];
        for (i, v) in g.data.iter().enumerate() {
            out[i % n] += v;
        }
        Tensor {
            shape: shape.to_vec(),
            data: out,
        }
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                if self.requires_grad(*a) {
                    let da = mm_nt(&g.data, &vb.data, m, n, k);
                    self.accumulate(grads, *a, Tensor { shape: vec![m, k], data: da });
                }
                if self.requires_grad(*b) {
                    let db = mm_tn(&va.data, &g.data, m, k, n);
                    self.accumulate(grads, *b, Tensor { shape: vec![k, n], data: db });
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_broadcast(g, *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    let gb = self.reduce_broadcast(&g.map(|x| -x), *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let nb = vb.data.len();
                if self.requires_grad(*a) {
                    let data = g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * vb.data[i % nb])
                        .collect();
                    self.accumulate(grads, *a, Tensor { shape: va.shape.clone(), data });
                }
                if self.requires_grad(*b) {
                    let full = Tensor {
                        shape: va.shape.clone(),
                        data: g.data.iter().zip(&va.data).map(|(gv, x)| gv * x).collect(),
                    };
                    let gb = self.reduce_broadcast(&full, *b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(kind, a) => {
                let x = &self.value(*a).data;
                let y = &value.data;
                let data: Vec<f64> = match kind {
                    Unary::Neg => g.data.iter().map(|v| -v).collect(),
                    Unary::Tanh => g.data.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect(),
                    Unary::Sigmoid => g.data.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
                    Unary::Softplus => g.data.iter().zip(x).map(|(gv, xv)| gv * sigmoid(*xv)).collect(),
                    Unary::Exp => g.data.iter().zip(y).map(|(gv, e)| gv * e).collect(),
                    Unary::Log => g.data.iter().zip(x).map(|(gv, xv)| gv / xv).collect(),
                    Unary::Square => g.data.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect(),
                };
                self.accumulate(grads, *a, Tensor { shape: value.shape.clone(), data });
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(shape, g.data[0]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = self.value(*a).data.len() as f64;
                self.accumulate(grads, *a, Tensor::full(shape, g.data[0] / n));
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a).to_vec();
                let c = shape[1];
                let data = (0..shape[0] * c).map(|i| g.data[i % c]).collect();
                self.accumulate(grads, *a, Tensor { shape, data });
            }
            Op::ConcatCols(parts) => {
                let rows = value.shape[0];
                let total = value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            data.extend_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor { shape: vec![rows, w], data });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = value.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    if self.requires_grad(p) {
                        let data = g.data[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(grads, p, Tensor { shape: vec![r, cols], data });
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.shape(*a).to_vec();
                let (r, c) = (shape[0], shape[1]);
                let len = value.shape[1];
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    data[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, Tensor { shape, data });
            }
            Op::SliceRows(a, start) => {
                let shape = self.shape(*a).to_vec();
                let c = shape[1];
                let mut data = vec![0.0; shape[0] * c];
                data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, Tensor { shape, data });
            }
            Op::GatherRows(a, index) => {
                let shape = self.shape(*a).to_vec();
                let c = shape[1];
                let mut data = vec![0.0; shape[0] * c];
                for (i, &src) in index.iter().enumerate() {
                    for (d, s) in data[src * c..(src + 1) * c].iter_mut().zip(&g.data[i * c..(i + 1) * c]) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, Tensor { shape, data });
            }
        }
    }
}

/// Neumaier-compensated sum; keeps reductions accurate to a few ulps so
/// finite-difference checks are not swamped by summation roundoff.
pub fn compensated_sum(v: &[f64]) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for &x in v {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares analytic gradients of a scalar function against central finite
/// differences over every coordinate of every input, using the fourth-order
/// stencil `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// `build` records the function on a fresh graph given one node per input
/// (all trainable) and returns the scalar output node. The reported error is
/// `max |analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(DiffError::Invalid(format!("grad_check: step must be positive, got {step}")));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let v = g.value(out);
        if v.shape != [1] {
            return Err(DiffError::NotScalar(v.shape.clone()));
        }
        Ok(v.data[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    if !g.value(out).is_finite() {
        return Err(DiffError::NonFinite("grad_check output".into()));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (t, &id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(id, inputs[t].shape());
        for i in 0..inputs[t].len() {
            let orig = work[t].data[i];
            let mut at = |offset: f64| -> Result<f64> {
                work[t].data[i] = orig + offset;
                let v = eval(&work)?;
                if !v.is_finite() {
                    return Err(DiffError::NonFinite(format!("grad_check input {t}[{i}]")));
                }
                Ok(v)
            };
            let (fp2, fp, fm, fm2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            work[t].data[i] = orig;
            // Differences first: an input the output ignores gives exactly 0.
            let numeric = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * step);
            let a = analytic.data[i];
            if !a.is_finite() {
                return Err(DiffError::NonFinite(format!("analytic gradient {t}[{i}]")));
            }
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        passed: worst < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let a = g.constant(t(&[3, 3], &[1., -2., 3., 0.5, 4., 7., -1., 2., 9.]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.softplus(x);
        assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tanh_sum_of_zeros() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.tanh(x);
        let s = g.sum(y);
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(3.0));
        let p = g.mul(x, y).unwrap();
        let gr = g.backward(p).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 3.0);
        assert_eq!(gr.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2], &[5., -6., 7., 0.25]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(a).unwrap().data(), g.value(b).data());
        assert!(gr.get(b).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, c), Err(DiffError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn trailing_broadcast_gradient_reduces() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.param(Tensor::vector(vec![1., 2., 3.]));
        let y = g.add(a, b).unwrap();
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(b).unwrap().data(), &[4., 4., 4.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn backward_twice_is_idempotent() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.square(x);
        let g1 = g.backward(y).unwrap();
        let g2 = g.backward(y).unwrap();
        assert_eq!(g1.get(x).unwrap().item(), g2.get(x).unwrap().item());
        assert_eq!(g1.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let gr = g.backward(b).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn grad_check_square() {
        let r = grad_check(|g, x| Ok(g.square(x[0])), &[Tensor::scalar(3.0)], 1e-5, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_constant_function() {
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_ignored_input_is_exact() {
        // f only reads x[0]; at this value the stencil terms in left-to-right
        // order would not cancel exactly.
        let r = grad_check(
            |g, x| {
                let c = g.constant(Tensor::scalar(-9.531499315318563));
                g.add(x[0], c)
            },
            &[Tensor::scalar(0.0), Tensor::vector(vec![-0.64, 0.48])],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        assert!(grad_check(|g, x| Ok(g.sum(x[0])), &[Tensor::scalar(1.0)], 0.0, 1e-4).is_err());
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let r = grad_check(|g, x| Ok(g.log(x[0])), &[Tensor::scalar(-1.0)], 1e-5, 1e-4);
        assert!(matches!(r, Err(DiffError::NonFinite(_))));
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(DiffError::DataLength { .. })
        ));
    }
}
