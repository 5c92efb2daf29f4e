use std::cell::RefCell;
use std::f64::consts::PI;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, transpose_raw, Tensor};
use crate::error::{GsmnError, Result};

/// Norm below which a vector is treated as degenerate by `cosine`,
/// `block_cosine_rows` and `l2_normalize_rows`.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Softplus(Var),
    Recip(Var),
    WrapAngle(Var),
    SoftmaxRows(Var, f64),
    L2NormalizeRows(Var),
    Cosine(Var, Var),
    BlockCosineRows(Var, Var, usize),
    Sum(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape for one forward pass.
///
/// Every operation appends a node holding its output value and the handles
/// of its inputs. [`Tape::backward`] consumes the tape and replays the
/// recorded rules in reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn rewind(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    /// Records a constant input. No gradient is ever produced for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let data = n.value.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::from_parts(n.value.shape().to_vec(), data),
                n.requires_grad,
            )
        };
        self.push(value, op, rg)
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(GsmnError::dim(name, ta.shape(), tb.shape()));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
                return Err(GsmnError::dim("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            Tensor::from_parts(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if !t.is_matrix() {
                return Err(GsmnError::dim("transpose", t.shape(), &[]));
            }
            let (r, c) = (t.rows(), t.cols());
            (
                Tensor::from_parts(vec![c, r], transpose_raw(t.data(), r, c)),
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `x[m×n]`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tr) = (&nodes[x.0].value, &nodes[row.0].value);
            let n = tx.cols();
            if tr.len() != n || tr.rows() != 1 || tx.shape().len() > 2 {
                return Err(GsmnError::dim("add_row", tx.shape(), tr.shape()));
            }
            let mut data = tx.data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (d, &b) in chunk.iter_mut().zip(tr.data()) {
                    *d += b;
                }
            }
            Tensor::from_parts(tx.shape().to_vec(), data)
        };
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    fn scalar_of(&self, name: &'static str, s: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let t = &nodes[s.0].value;
        if t.len() != 1 {
            return Err(GsmnError::dim(name, t.shape(), &[]));
        }
        Ok(t.data()[0])
    }

    /// `x + s` with `s` a one-element variable.
    pub fn add_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("add_scalar", s)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::from_parts(
                t.shape().to_vec(),
                t.data().iter().map(|v| v + sv).collect(),
            )
        };
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::AddScalar(x, s), rg))
    }

    /// `x · s` with `s` a one-element variable.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("mul_scalar", s)?;
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::from_parts(
                t.shape().to_vec(),
                t.data().iter().map(|v| v * sv).collect(),
            )
        };
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds a constant.
    pub fn offset(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn recip(&self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    /// Wraps angles into `(-π, π]`; gradient is the identity.
    pub fn wrap_angle(&self, x: Var) -> Var {
        self.unary(x, Op::WrapAngle(x), wrap_angle)
    }

    /// Row-wise `softmax(scale · x)`, stabilised by the row maximum.
    pub fn softmax_rows(&self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GsmnError::Contract(format!(
                "softmax scale must be positive, got {scale}"
            )));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if !t.is_finite() {
                return Err(GsmnError::Numeric("non-finite input to softmax".into()));
            }
            let cols = t.cols();
            let mut data = Vec::with_capacity(t.len());
            for row in t.data().chunks(cols) {
                data.extend(softmax_row(row, scale));
            }
            (
                Tensor::from_parts(t.shape().to_vec(), data),
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::SoftmaxRows(x, scale), rg))
    }

    /// Scales every row to unit L2 norm. Rows with norm below
    /// [`NORM_EPS`] become zero.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let cols = t.cols();
            let mut data = Vec::with_capacity(t.len());
            for row in t.data().chunks(cols) {
                let norm = l2(row);
                if norm < NORM_EPS {
                    data.extend(std::iter::repeat(0.0).take(cols));
                } else {
                    data.extend(row.iter().map(|v| v / norm));
                }
            }
            (
                Tensor::from_parts(t.shape().to_vec(), data),
                nodes[x.0].requires_grad,
            )
        };
        self.push(value, Op::L2NormalizeRows(x), rg)
    }

    /// Cosine similarity of two equally sized tensors, viewed flat.
    /// Degenerate inputs yield 0 with no gradient.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.len() != tb.len() {
                return Err(GsmnError::dim("cosine", ta.shape(), tb.shape()));
            }
            Tensor::scalar(cosine_raw(ta.data(), tb.data()).0)
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Cosine(a, b), rg))
    }

    /// Per-row, per-block cosine similarity: `x`, `c` are `[p×d]`, the
    /// result is `[p×t]` with entry `(i, j)` the cosine of block `j` of row `i`.
    pub fn block_cosine_rows(&self, x: Var, c: Var, blocks: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tc) = (&nodes[x.0].value, &nodes[c.0].value);
            if tx.shape() != tc.shape() || !tx.is_matrix() {
                return Err(GsmnError::dim("block_cosine_rows", tx.shape(), tc.shape()));
            }
            let (p, d) = (tx.rows(), tx.cols());
            let bs = block_size(d, blocks)?;
            let mut data = Vec::with_capacity(p * blocks);
            for (xr, cr) in tx.data().chunks(d).zip(tc.data().chunks(d)) {
                for (xb, cb) in xr.chunks(bs).zip(cr.chunks(bs)) {
                    data.push(cosine_raw(xb, cb).0);
                }
            }
            Tensor::from_parts(vec![p, blocks], data)
        };
        let rg = self.any_grad(&[x, c]);
        Ok(self.push(value, Op::BlockCosineRows(x, c, blocks), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (Tensor::scalar(t.data().iter().sum()), nodes[x.0].requires_grad)
        };
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean over rows of `x[m×n]`, giving `[1×n]`.
    pub fn mean_rows(&self, x: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (m, n) = (t.rows(), t.cols());
            let mut data = vec![0.0; n];
            for row in t.data().chunks(n) {
                for (d, v) in data.iter_mut().zip(row) {
                    *d += v;
                }
            }
            for d in &mut data {
                *d /= m as f64;
            }
            (Tensor::from_parts(vec![1, n], data), nodes[x.0].requires_grad)
        };
        self.push(value, Op::MeanRows(x), rg)
    }

    /// Concatenates along the first axis. Vectors and scalars join into a
    /// vector; matrices with equal column counts stack their rows.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GsmnError::Contract("concat of nothing".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let matrix = first.is_matrix();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if matrix && (!t.is_matrix() || t.cols() != first.cols()) {
                    return Err(GsmnError::dim("concat", first.shape(), t.shape()));
                }
                if !matrix && t.shape().len() > 1 {
                    return Err(GsmnError::dim("concat", first.shape(), t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            if matrix {
                Tensor::from_parts(vec![rows, first.cols()], data)
            } else {
                Tensor::vector(data)
            }
        };
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GsmnError::Contract("concat_cols of nothing".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut total = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rows() != rows || t.shape().len() > 2 {
                    return Err(GsmnError::dim(
                        "concat_cols",
                        nodes[parts[0].0].value.shape(),
                        t.shape(),
                    ));
                }
                total += t.cols();
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor::from_parts(vec![rows, total], data)
        };
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Contiguous flat slice `[start, start + len)`, returned with `shape`.
    pub fn slice(&self, x: Var, start: usize, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if len == 0 || start + len > t.len() {
                return Err(GsmnError::dim("slice", t.shape(), &shape));
            }
            (
                Tensor::from_parts(shape, t.data()[start..start + len].to_vec()),
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Slice(x, start), rg))
    }

    /// Row `i` of a matrix as `[1×n]`.
    pub fn row(&self, x: Var, i: usize) -> Result<Var> {
        let (rows, cols) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (t.rows(), t.cols())
        };
        if i >= rows {
            return Err(GsmnError::Contract(format!("row {i} of {rows}")));
        }
        self.slice(x, i * cols, vec![1, cols])
    }

    /// Splits a vector of length `d` into `blocks` contiguous pieces.
    pub fn slice_blocks(&self, x: Var, blocks: usize) -> Result<Vec<Var>> {
        let d = self.nodes.borrow()[x.0].value.len();
        let bs = block_size(d, blocks)?;
        (0..blocks)
            .map(|b| self.slice(x, b * bs, vec![bs]))
            .collect()
    }

    /// Picks flat entries of `x` by index into a vector.
    pub fn gather(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if indices.is_empty() || indices.iter().any(|&i| i >= t.len()) {
                return Err(GsmnError::Contract("gather index out of range".into()));
            }
            (
                Tensor::vector(indices.iter().map(|&i| t.data()[i]).collect()),
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Gather(x, indices.to_vec()), rg))
    }

    /// Picks rows of a matrix (embedding lookup).
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if !t.is_matrix() || indices.is_empty() || indices.iter().any(|&i| i >= t.rows()) {
                return Err(GsmnError::Contract("gather_rows index out of range".into()));
            }
            let mut data = Vec::with_capacity(indices.len() * t.cols());
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            (
                Tensor::from_parts(vec![indices.len(), t.cols()], data),
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), rg))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[x.0].value.reshaped(shape)?,
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Arranges one-element variables into a tensor of the given shape.
    pub fn stack(&self, scalars: &[Var], shape: Vec<usize>) -> Result<Var> {
        let v = self.concat(scalars)?;
        self.reshape(v, shape)
    }

    /// Consumes the tape and back-propagates from a one-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        if nodes[loss.0].value.len() != 1 {
            return Err(GsmnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` is not
    /// differentiable or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if nodes[a.0].requires_grad {
                accumulate(grads, nodes, *a, matmul_nt(g, tb.data(), m, n, k));
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, nodes, *b, matmul_tn(ta.data(), g, m, k, n));
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.rows(), out.cols());
            accumulate(grads, nodes, *x, transpose_raw(g, r, c));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            accumulate(
                grads,
                nodes,
                *a,
                g.iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
            );
            accumulate(
                grads,
                nodes,
                *b,
                g.iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
            );
        }
        Op::AddRow(x, row) => {
            accumulate(grads, nodes, *x, g.to_vec());
            let n = out.cols();
            accumulate_with(grads, nodes, *row, |acc| {
                for chunk in g.chunks(n) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
            });
        }
        Op::AddScalar(x, s) => {
            accumulate(grads, nodes, *x, g.to_vec());
            accumulate(grads, nodes, *s, vec![g.iter().sum()]);
        }
        Op::MulScalar(x, s) => {
            let sv = val(*s).data()[0];
            accumulate(grads, nodes, *x, g.iter().map(|v| v * sv).collect());
            let dot = g.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
            accumulate(grads, nodes, *s, vec![dot]);
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.iter().map(|v| v * c).collect()),
        Op::Offset(x) | Op::WrapAngle(x) | Op::Reshape(x) => {
            accumulate(grads, nodes, *x, g.to_vec())
        }
        Op::Tanh(x) => accumulate(
            grads,
            nodes,
            *x,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        ),
        Op::Sigmoid(x) => accumulate(
            grads,
            nodes,
            *x,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        ),
        Op::Exp(x) => accumulate(
            grads,
            nodes,
            *x,
            g.iter().zip(out.data()).map(|(g, y)| g * y).collect(),
        ),
        Op::Square(x) => accumulate(
            grads,
            nodes,
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, v)| 2.0 * g * v)
                .collect(),
        ),
        Op::Relu(x) => accumulate(
            grads,
            nodes,
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Op::Softplus(x) => accumulate(
            grads,
            nodes,
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, v)| g * sigmoid(*v))
                .collect(),
        ),
        Op::Recip(x) => accumulate(
            grads,
            nodes,
            *x,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| -g * y * y)
                .collect(),
        ),
        Op::SoftmaxRows(x, scale) => {
            let n = out.cols();
            let mut dx = Vec::with_capacity(out.len());
            for (yr, gr) in out.data().chunks(n).zip(g.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                dx.extend(yr.iter().zip(gr).map(|(y, g)| scale * y * (g - dot)));
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::L2NormalizeRows(x) => {
            let n = out.cols();
            let mut dx = Vec::with_capacity(out.len());
            for ((xr, yr), gr) in val(*x)
                .data()
                .chunks(n)
                .zip(out.data().chunks(n))
                .zip(g.chunks(n))
            {
                let norm = l2(xr);
                if norm < NORM_EPS {
                    dx.extend(std::iter::repeat(0.0).take(n));
                    continue;
                }
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                dx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / norm));
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Cosine(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (da, db) = cosine_grad(ta.data(), tb.data(), g[0]);
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::BlockCosineRows(x, c, blocks) => {
            let (tx, tc) = (val(*x), val(*c));
            let d = tx.cols();
            let bs = d / blocks;
            let mut dx = vec![0.0; tx.len()];
            let mut dc = vec![0.0; tc.len()];
            for (idx, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let (row, blk) = (idx / blocks, idx % blocks);
                let start = row * d + blk * bs;
                let range = start..start + bs;
                let (ga, gb) = cosine_grad(&tx.data()[range.clone()], &tc.data()[range], gv);
                for (k, (va, vb)) in ga.into_iter().zip(gb).enumerate() {
                    dx[start + k] += va;
                    dc[start + k] += vb;
                }
            }
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *c, dc);
        }
        Op::Sum(x) => {
            let len = val(*x).len();
            accumulate(grads, nodes, *x, vec![g[0]; len]);
        }
        Op::MeanRows(x) => {
            let t = val(*x);
            let m = t.rows() as f64;
            let mut dx = Vec::with_capacity(t.len());
            for _ in 0..t.rows() {
                dx.extend(g.iter().map(|v| v / m));
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                accumulate(grads, nodes, *p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut col = 0;
            for p in parts {
                let t = val(*p);
                let c = t.cols();
                let mut dp = Vec::with_capacity(t.len());
                for r in 0..t.rows() {
                    dp.extend_from_slice(&g[r * total + col..r * total + col + c]);
                }
                accumulate(grads, nodes, *p, dp);
                col += c;
            }
        }
        Op::Slice(x, start) => {
            let start = *start;
            accumulate_with(grads, nodes, *x, |acc| {
                for (a, v) in acc[start..start + g.len()].iter_mut().zip(g) {
                    *a += v;
                }
            });
        }
        Op::Gather(x, idx) => {
            accumulate_with(grads, nodes, *x, |acc| {
                for (&i, v) in idx.iter().zip(g) {
                    acc[i] += v;
                }
            });
        }
        Op::GatherRows(x, idx) => {
            let n = out.cols();
            accumulate_with(grads, nodes, *x, |acc| {
                for (&i, gr) in idx.iter().zip(g.chunks(n)) {
                    for (a, v) in acc[i * n..(i + 1) * n].iter_mut().zip(gr) {
                        *a += v;
                    }
                }
            });
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.max(0.0) + (-v.abs()).exp().ln_1p()
    }
}

/// Maps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub(crate) fn softmax_row(row: &[f64], scale: f64) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| (scale * (v - max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(move |e| e / total)
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Returns `(cos, ‖a‖, ‖b‖)`; cos is 0 when either norm is degenerate.
pub(crate) fn cosine_raw(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (na, nb) = (l2(a), l2(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return (0.0, na, nb);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb), na, nb)
}

fn cosine_grad(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let (cos, na, nb) = cosine_raw(a, b);
    if na < NORM_EPS || nb < NORM_EPS {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let inv = 1.0 / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (y * inv - cos * x / (na * na)))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (x * inv - cos * y / (nb * nb)))
        .collect();
    (da, db)
}

pub(crate) fn block_size(d: usize, blocks: usize) -> Result<usize> {
    if blocks == 0 || d % blocks != 0 {
        return Err(GsmnError::Config(format!(
            "block count {blocks} does not divide dimension {d}"
        )));
    }
    Ok(d / blocks)
}
