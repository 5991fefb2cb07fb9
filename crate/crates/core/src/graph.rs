//! Reverse-mode autodiff over a fixed op set.
//!
//! [`Graph`] is an eager tape: every builder call validates shapes,
//! computes the result immediately, and records the op. [`Graph::backward`]
//! replays the tape in reverse, visiting each node exactly once. Nodes are
//! topologically ordered by construction, so a single reverse sweep is a
//! valid traversal.
//!
//! Constants never receive gradients; that is how a fixed transport plan
//! participates in a loss without being differentiated through.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu, gelu_grad, sigmoid, softplus, TensorBase};

/// Handle to a node in one [`Graph`]. Not valid across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    /// Gradient is accumulated and readable.
    Variable,
    /// Gradient is zero by construction; backward does not propagate into it.
    Constant,
}

enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId),
    AddBias(NodeId, NodeId),
    RowSoftmax(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Max over an axis; the argmax per lane is saved for routing gradients.
    MaxAxis(NodeId, usize, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Per-row L2 normalization; the saved mask marks zero rows, which pass
    /// through unchanged and receive no gradient.
    L2NormalizeRows(NodeId, Vec<bool>),
    Reshape(NodeId),
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: TensorBase<S>,
    grad: Option<TensorBase<S>>,
    role: Role,
    name: Option<String>,
}

/// Eager reverse-mode tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// True once any zero row passed through `l2_normalize_rows`.
    degenerate_rows_seen: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), degenerate_rows_seen: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether any L2 normalization hit an all-zero row.
    pub fn degenerate_rows_seen(&self) -> bool {
        self.degenerate_rows_seen
    }

    fn push(&mut self, op: Op<S>, value: TensorBase<S>, role: Role, name: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, grad: None, role, name });
        id
    }

    /// A differentiable input. Its gradient is available after `backward`.
    pub fn input(&mut self, name: &str, value: TensorBase<S>) -> NodeId {
        self.push(Op::Leaf, value, Role::Variable, Some(name.to_string()))
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: &str, value: TensorBase<S>) -> NodeId {
        self.push(Op::Leaf, value, Role::Variable, Some(name.to_string()))
    }

    /// A constant: backward treats its gradient as identically zero.
    pub fn constant(&mut self, value: TensorBase<S>) -> NodeId {
        self.push(Op::Leaf, value, Role::Constant, None)
    }

    pub fn value(&self, id: NodeId) -> &TensorBase<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node. Constants
    /// and nodes the loss does not reach yield zeros.
    pub fn grad(&self, id: NodeId) -> TensorBase<S> {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => TensorBase::zeros(node.value.rows(), node.value.cols()),
        }
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: self.nodes[a.0].value.shape(),
            rhs: self.nodes[b.0].value.shape(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let value = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), value, Role::Variable, None))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.transpose();
        self.push(Op::Transpose(a), value, Role::Variable, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value, Role::Variable, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value, Role::Variable, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value, Role::Variable, None))
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let value = self.nodes[a.0].value.scale(factor);
        self.push(Op::Scale(a, factor), value, Role::Variable, None)
    }

    pub fn add_scalar(&mut self, a: NodeId, shift: S) -> NodeId {
        let value = self.nodes[a.0].value.add_scalar(shift);
        self.push(Op::AddScalar(a), value, Role::Variable, None)
    }

    /// Add a 1×C bias row to every row of an R×C tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let value = va.add_bias(vb);
        Ok(self.push(Op::AddBias(a, bias), value, Role::Variable, None))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.row_softmax();
        self.push(Op::RowSoftmax(a), value, Role::Variable, None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        self.push(Op::Exp(a), value, Role::Variable, None)
    }

    /// Natural log; the domain is positive inputs.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x.ln());
        self.push(Op::Log(a), value, Role::Variable, None)
    }

    /// Square root; the domain is nonnegative inputs.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x.sqrt());
        self.push(Op::Sqrt(a), value, Role::Variable, None)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(softplus);
        self.push(Op::Softplus(a), value, Role::Variable, None)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(gelu);
        self.push(Op::Gelu(a), value, Role::Variable, None)
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let value = self.nodes[a.0].value.sum_axis(axis);
        self.push(Op::SumAxis(a, axis), value, Role::Variable, None)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let value = self.nodes[a.0].value.mean_axis(axis);
        self.push(Op::MeanAxis(a, axis), value, Role::Variable, None)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = TensorBase::scalar(self.nodes[a.0].value.sum_all());
        self.push(Op::SumAll(a), value, Role::Variable, None)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let value = TensorBase::scalar(v.sum_all() / S::from_f64_lossy(v.len() as f64));
        self.push(Op::MeanAll(a), value, Role::Variable, None)
    }

    /// Max over an axis. Ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let (value, argmax) = self.nodes[a.0].value.max_axis(axis);
        self.push(Op::MaxAxis(a, axis, argmax), value, Role::Variable, None)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if start > end || end > v.cols() {
            return Err(Error::InvalidArg {
                op: "slice_cols",
                msg: format!("range {start}..{end} of {} cols at node {}", v.cols(), self.nodes.len()),
            });
        }
        let value = v.slice_cols(start, end);
        Ok(self.push(Op::SliceCols(a, start, end), value, Role::Variable, None))
    }

    /// Split a tensor with an even column count into halves.
    pub fn split_halves(&mut self, a: NodeId) -> Result<(NodeId, NodeId)> {
        let cols = self.nodes[a.0].value.cols();
        if cols % 2 != 0 {
            return Err(Error::InvalidArg {
                op: "split_halves",
                msg: format!("odd column count {cols} at node {}", self.nodes.len()),
            });
        }
        let left = self.slice_cols(a, 0, cols / 2)?;
        let right = self.slice_cols(a, cols / 2, cols)?;
        Ok((left, right))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg { op: "concat_cols", msg: "no inputs".into() });
        }
        let rows = self.nodes[parts[0].0].value.rows();
        for &p in parts {
            if self.nodes[p.0].value.rows() != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
        }
        let tensors: Vec<&TensorBase<S>> = parts.iter().map(|&p| &self.nodes[p.0].value).collect();
        let value = TensorBase::concat_cols(&tensors);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, Role::Variable, None))
    }

    /// L2-normalize rows. Zero rows pass through and are flagged on the
    /// graph rather than failing, so degenerate tokens stay detectable.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (value, zero_rows) = self.nodes[a.0].value.l2_normalize_rows();
        if zero_rows.iter().any(|&z| z) {
            self.degenerate_rows_seen = true;
        }
        self.push(Op::L2NormalizeRows(a, zero_rows), value, Role::Variable, None)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if rows * cols != v.len() {
            return Err(Error::InvalidArg {
                op: "reshape",
                msg: format!("{:?} -> [{rows}, {cols}] at node {}", v.shape(), self.nodes.len()),
            });
        }
        let value = v.reshaped(rows, cols);
        Ok(self.push(Op::Reshape(a), value, Role::Variable, None))
    }

    fn accumulate(&mut self, id: NodeId, delta: &TensorBase<S>) {
        let node = &mut self.nodes[id.0];
        if node.role == Role::Constant {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss node. Accumulated gradients are
    /// readable via [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss { node: loss.0, shape });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(TensorBase::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            let Some(grad_out) = self.nodes[i].grad.clone() else { continue };
            // Op inputs strictly precede i, so borrowing values of earlier
            // nodes while accumulating is safe via split indexing.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad_out.matmul(&self.nodes[b.0].value.transpose());
                    let db = self.nodes[a.0].value.transpose().matmul(&grad_out);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let da = grad_out.transpose();
                    self.accumulate(a, &da);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &grad_out);
                    self.accumulate(b, &grad_out);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &grad_out);
                    let neg = grad_out.scale(-S::one());
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad_out.zip_map(&self.nodes[b.0].value, |g, y| g * y);
                    let db = grad_out.zip_map(&self.nodes[a.0].value, |g, x| g * x);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, factor) => {
                    let (a, factor) = (*a, *factor);
                    let da = grad_out.scale(factor);
                    self.accumulate(a, &da);
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.accumulate(a, &grad_out);
                }
                Op::AddBias(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    self.accumulate(a, &grad_out);
                    let db = grad_out.sum_axis(0);
                    self.accumulate(bias, &db);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let mut da = TensorBase::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = S::zero();
                        for c in 0..y.cols() {
                            dot += grad_out.get(r, c) * y.get(r, c);
                        }
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (grad_out.get(r, c) - dot));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let da = grad_out.zip_map(&self.nodes[i].value, |g, y| g * y);
                    self.accumulate(a, &da);
                }
                Op::Log(a) => {
                    let a = *a;
                    let da = grad_out.zip_map(&self.nodes[a.0].value, |g, x| g / x);
                    self.accumulate(a, &da);
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let half = S::from_f64_lossy(0.5);
                    let da = grad_out.zip_map(&self.nodes[i].value, |g, y| g * half / y);
                    self.accumulate(a, &da);
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let da = grad_out.zip_map(&self.nodes[a.0].value, |g, x| g * sigmoid(x));
                    self.accumulate(a, &da);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let da = grad_out.zip_map(&self.nodes[a.0].value, |g, x| g * gelu_grad(x));
                    self.accumulate(a, &da);
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let (a, axis) = (*a, *axis);
                    let mean = matches!(self.nodes[i].op, Op::MeanAxis(..));
                    let src = &self.nodes[a.0].value;
                    let n = if axis == 0 { src.rows() } else { src.cols() };
                    let w = if mean { S::one() / S::from_f64_lossy(n as f64) } else { S::one() };
                    let mut da = TensorBase::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for c in 0..src.cols() {
                            let g = if axis == 0 { grad_out.get(0, c) } else { grad_out.get(r, 0) };
                            da.set(r, c, g * w);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) | Op::MeanAll(a) => {
                    let a = *a;
                    let mean = matches!(self.nodes[i].op, Op::MeanAll(_));
                    let src = &self.nodes[a.0].value;
                    let w = if mean {
                        grad_out.item() / S::from_f64_lossy(src.len() as f64)
                    } else {
                        grad_out.item()
                    };
                    let da = TensorBase::filled(src.rows(), src.cols(), w);
                    self.accumulate(a, &da);
                }
                Op::MaxAxis(a, axis, argmax) => {
                    let (a, axis) = (*a, *axis);
                    let argmax = argmax.clone();
                    let src = &self.nodes[a.0].value;
                    let mut da = TensorBase::zeros(src.rows(), src.cols());
                    if axis == 0 {
                        for (c, &r) in argmax.iter().enumerate() {
                            da.set(r, c, grad_out.get(0, c));
                        }
                    } else {
                        for (r, &c) in argmax.iter().enumerate() {
                            da.set(r, c, grad_out.get(r, 0));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SliceCols(a, start, _end) => {
                    let (a, start) = (*a, *start);
                    let src = &self.nodes[a.0].value;
                    let mut da = TensorBase::zeros(src.rows(), src.cols());
                    for r in 0..grad_out.rows() {
                        for c in 0..grad_out.cols() {
                            da.set(r, start + c, grad_out.get(r, c));
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let dp = grad_out.slice_cols(offset, offset + w);
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }
                Op::L2NormalizeRows(a, zero_rows) => {
                    let a = *a;
                    let zero_rows = zero_rows.clone();
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let mut da = TensorBase::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        if zero_rows[r] {
                            continue;
                        }
                        let mut sq = S::zero();
                        for c in 0..x.cols() {
                            sq += x.get(r, c) * x.get(r, c);
                        }
                        let norm = sq.sqrt();
                        let mut dot = S::zero();
                        for c in 0..x.cols() {
                            dot += grad_out.get(r, c) * y.get(r, c);
                        }
                        for c in 0..x.cols() {
                            da.set(r, c, (grad_out.get(r, c) - y.get(r, c) * dot) / norm);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let src = &self.nodes[a.0].value;
                    let da = grad_out.reshaped(src.rows(), src.cols());
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }
}

/// Relative-error gradient check of a scalar-valued function against central
/// finite differences: max over coordinates of
/// |g_ad − g_fd| / max(1, |g_ad|, |g_fd|).
pub fn grad_check<S, F>(f: F, point: &TensorBase<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, NodeId) -> Result<NodeId>,
{
    if eps <= S::zero() || eps > S::from_f64_lossy(1e-2) {
        return Err(Error::InvalidArg { op: "grad_check", msg: format!("eps {eps} outside (0, 1e-2]") });
    }

    let mut g = Graph::new();
    let x = g.input("x", point.clone());
    let loss = f(&mut g, x)?;
    let shape = g.value(loss).shape();
    if shape != [1, 1] {
        return Err(Error::NonScalarLoss { node: loss.index(), shape });
    }
    g.backward(loss)?;
    let analytic = g.grad(x);

    let eval = |p: &TensorBase<S>| -> Result<S> {
        let mut g = Graph::new();
        let x = g.input("x", p.clone());
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item())
    };

    let mut max_rel = S::zero();
    let mut probe = point.clone();
    for idx in 0..point.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[idx] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[idx] = orig;

        let fd = (up - down) / (S::from_f64_lossy(2.0) * eps);
        let ad = analytic.data()[idx];
        let rel = (ad - fd).abs() / S::one().max(ad.abs()).max(fd.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Result of gradient-checking one op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Gradient-check every op in the fixed set against central finite
/// differences at `points` random points each. Returns the worst relative
/// error per op. Points are drawn away from kinks (max ties) and domain
/// edges (log, sqrt, normalization), where finite differences are not a
/// valid oracle.
pub fn op_gradient_checks(points: usize, seed: u64) -> Vec<OpCheck> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    type G = Graph<f64>;
    type T = TensorBase<f64>;
    type BuildFn = fn(&mut G, NodeId, &T) -> Result<NodeId>;

    // Each op gets (name, probe rows, probe cols, positive-domain?, builder).
    // The weight tensor keeps the loss gradient non-uniform.
    let ops: Vec<(&'static str, usize, usize, bool, BuildFn)> = vec![
        ("matmul_lhs", 2, 3, false, |g, x, w| {
            let c = g.constant(T::from_vec(3, 2, vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0]));
            let y = g.matmul(x, c)?;
            let w = g.constant(w.reshaped(2, 2));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("matmul_rhs", 3, 2, false, |g, x, w| {
            let c = g.constant(T::from_vec(2, 3, vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0]));
            let y = g.matmul(c, x)?;
            let w = g.constant(w.reshaped(2, 2));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("transpose", 2, 3, false, |g, x, w| {
            let y = g.transpose(x);
            let w = g.constant(w.reshaped(3, 2));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("add", 2, 3, false, |g, x, w| {
            let c = g.constant(T::filled(2, 3, 0.7));
            let y = g.add(x, c)?;
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("sub", 2, 3, false, |g, x, w| {
            let c = g.constant(T::filled(2, 3, 0.7));
            let y = g.sub(c, x)?;
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("mul", 2, 3, false, |g, x, w| {
            let y = g.mul(x, x)?;
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("scale", 2, 3, false, |g, x, w| {
            let y = g.scale(x, -1.75);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("add_scalar", 2, 3, false, |g, x, w| {
            let y = g.add_scalar(x, 0.3);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("add_bias_input", 2, 3, false, |g, x, w| {
            let bias = g.constant(T::from_vec(1, 3, vec![0.1, -0.2, 0.3]));
            let y = g.add_bias(x, bias)?;
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("add_bias_bias", 1, 3, false, |g, x, w| {
            let m = g.constant(T::from_vec(2, 3, vec![0.4, -0.6, 1.1, 0.9, 0.2, -1.3]));
            let y = g.add_bias(m, x)?;
            let w = g.constant(w.reshaped(1, 3));
            let wide = g.constant(T::filled(2, 3, 1.0));
            let scaled = g.mul(y, wide)?;
            let col = g.sum_axis(scaled, 0);
            let p = g.mul(col, w)?;
            Ok(g.sum_all(p))
        }),
        ("row_softmax", 2, 3, false, |g, x, w| {
            let y = g.row_softmax(x);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("exp", 2, 3, false, |g, x, w| {
            let y = g.exp(x);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("log", 2, 3, true, |g, x, w| {
            let y = g.log(x);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("sqrt", 2, 3, true, |g, x, w| {
            let y = g.sqrt(x);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("softplus", 2, 3, false, |g, x, w| {
            let y = g.softplus(x);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("gelu", 2, 3, false, |g, x, w| {
            let y = g.gelu(x);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("sum_axis0", 2, 3, false, |g, x, w| {
            let y = g.sum_axis(x, 0);
            let w = g.constant(w.reshaped(1, 3));
            let wr = g.slice_cols(w, 0, 3)?;
            let p = g.mul(y, wr)?;
            Ok(g.sum_all(p))
        }),
        ("sum_axis1", 2, 3, false, |g, x, w| {
            let y = g.sum_axis(x, 1);
            let w = g.constant(w.reshaped(2, 1));
            let wr = g.slice_cols(w, 0, 1)?;
            let p = g.mul(y, wr)?;
            Ok(g.sum_all(p))
        }),
        ("mean_axis0", 2, 3, false, |g, x, w| {
            let y = g.mean_axis(x, 0);
            let w = g.constant(w.reshaped(1, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("mean_axis1", 2, 3, false, |g, x, w| {
            let y = g.mean_axis(x, 1);
            let w = g.constant(w.reshaped(2, 1));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("sum_all", 2, 3, false, |g, x, _w| Ok(g.sum_all(x))),
        ("mean_all", 2, 3, false, |g, x, _w| Ok(g.mean_all(x))),
        ("max_axis0", 2, 3, false, |g, x, w| {
            let y = g.max_axis(x, 0);
            let w = g.constant(w.reshaped(1, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("max_axis1", 2, 3, false, |g, x, w| {
            let y = g.max_axis(x, 1);
            let w = g.constant(w.reshaped(2, 1));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("slice_cols", 2, 4, false, |g, x, w| {
            let y = g.slice_cols(x, 1, 3)?;
            let w = g.constant(w.reshaped(2, 2));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("concat_cols", 2, 2, false, |g, x, w| {
            let c = g.constant(T::filled(2, 2, 0.4));
            let y = g.concat_cols(&[x, c])?;
            let w = g.constant(w.reshaped(2, 4));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("l2_normalize_rows", 2, 3, false, |g, x, w| {
            let y = g.l2_normalize_rows(x);
            let w = g.constant(w.reshaped(2, 3));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
        ("reshape", 2, 3, false, |g, x, w| {
            let y = g.reshape(x, 3, 2)?;
            let w = g.constant(w.reshaped(3, 2));
            let p = g.mul(y, w)?;
            Ok(g.sum_all(p))
        }),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(ops.len());
    for (name, rows, cols, positive, build) in ops {
        let needs_weights = match name {
            "matmul_lhs" | "matmul_rhs" => 4,
            "transpose" | "add" | "sub" | "mul" | "scale" | "add_scalar" | "add_bias_input" | "row_softmax"
            | "exp" | "log" | "sqrt" | "softplus" | "gelu" | "l2_normalize_rows" | "reshape" => rows * cols,
            "add_bias_bias" | "sum_axis0" | "mean_axis0" | "max_axis0" => cols,
            "sum_axis1" | "mean_axis1" | "max_axis1" => rows,
            "slice_cols" => 4,
            "concat_cols" => 8,
            _ => rows * cols,
        };
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            // Rejection-sample points away from max ties and domain edges.
            let point = loop {
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| {
                        if positive {
                            rng.gen_range(0.2..2.0)
                        } else {
                            rng.gen_range(-1.5..1.5)
                        }
                    })
                    .collect();
                let mut ok = true;
                if name.starts_with("max_axis") {
                    for i in 0..data.len() {
                        for j in (i + 1)..data.len() {
                            if (data[i] - data[j]).abs() < 1e-3 {
                                ok = false;
                            }
                        }
                    }
                }
                if name == "l2_normalize_rows" {
                    for r in 0..rows {
                        let norm: f64 =
                            data[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < 0.3 {
                            ok = false;
                        }
                    }
                }
                if ok {
                    break T::from_vec(rows, cols, data);
                }
            };
            let weights = T::from_vec(1, needs_weights, (0..needs_weights).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let err = grad_check(|g, x| build(g, x, &weights), &point, 1e-5)
                .unwrap_or_else(|e| panic!("op check {name}: {e}"));
            worst = worst.max(err);
        }
        out.push(OpCheck { name, max_rel_err: worst });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = TensorBase<f64>;

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g.constant(T::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let x = g.input("x", T::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x", T::scalar(0.0));
        let y = g.softplus(x);
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", T::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_jacobian_row_at_uniform_input() {
        // At a uniform input p = [1/3, 1/3, 1/3]; seeding e1 through a
        // sum-select gives the Jacobian row (diag(p) - p p^T) e1.
        let mut g = Graph::new();
        let x = g.input("x", T::zeros(1, 3));
        let s = g.row_softmax(x);
        let e1 = g.constant(T::from_vec(1, 3, vec![1.0, 0.0, 0.0]));
        let picked = g.mul(s, e1).unwrap();
        let loss = g.sum_all(picked);
        g.backward(loss).unwrap();
        let got = g.grad(x);
        let p = 1.0 / 3.0;
        let expect = [p - p * p, -p * p, -p * p];
        for (gv, ev) in got.data().iter().zip(expect.iter()) {
            assert!((gv - ev).abs() < 1e-14, "{gv} vs {ev}");
        }
    }

    #[test]
    fn constants_receive_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", T::from_vec(1, 2, vec![1.0, 2.0]));
        let c = g.constant(T::from_vec(1, 2, vec![5.0, 5.0]));
        let y = g.mul(x, c).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(c).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).data(), &[5.0, 5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", T::from_vec(1, 2, vec![1.0, 2.0]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_names_node_and_shapes() {
        let mut g = Graph::new();
        let a = g.input("a", T::zeros(2, 3));
        let b = g.input("b", T::zeros(2, 2));
        let err = g.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs, .. } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.input("x", T::from_vec(2, 2, vec![0.3, -1.2, 2.4, 0.01]));
            let s = g.row_softmax(x);
            let e = g.gelu(s);
            let loss = g.mean_all(e);
            g.value(loss).item()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn grad_check_linear_map_is_exact() {
        let point = T::from_vec(1, 4, vec![0.5, -1.0, 2.0, 0.0]);
        let err = grad_check(
            |g, x| {
                let w = g.constant(T::from_vec(4, 1, vec![1.0, -2.0, 3.0, 0.5]));
                g.matmul(x, w)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "linear map grad err {err}");
    }

    #[test]
    fn grad_check_softplus_at_zero() {
        let err = grad_check(
            |g, x| {
                let s = g.softplus(x);
                Ok(g.sum_all(s))
            },
            &T::scalar(0.0),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "softplus grad err {err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let r = grad_check(|g, x| Ok(g.sum_all(x)), &T::scalar(1.0), 0.5);
        assert!(r.is_err());
        let r = grad_check(|g, x| Ok(g.sum_all(x)), &T::scalar(1.0), 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn every_op_passes_gradient_check() {
        for check in op_gradient_checks(3, 1234) {
            assert!(check.max_rel_err <= 1e-4, "{}: {}", check.name, check.max_rel_err);
        }
    }

    #[test]
    fn l2_normalize_zero_row_gets_zero_grad_and_flags() {
        let mut g = Graph::new();
        let x = g.input("x", T::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]));
        let n = g.l2_normalize_rows(x);
        assert!(g.degenerate_rows_seen());
        let loss = g.sum_all(n);
        g.backward(loss).unwrap();
        let grad = g.grad(x);
        assert_eq!(grad.row(1), &[0.0, 0.0]);
        assert!(grad.row(0).iter().any(|&v| v != 0.0));
    }
}
