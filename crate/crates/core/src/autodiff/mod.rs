//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive is evaluated eagerly when recorded and appended to a
//! linear tape. Backward passes are themselves expressed in primitives, so
//! with `create_graph` set the returned gradients are ordinary nodes that can
//! be differentiated again. This is what makes the MAML meta-gradient exact:
//! the inner-loop update `w - α∇ℓ(w)` stays on the tape and the outer
//! gradient flows through the Hessian-vector products it implies.

mod check;
mod ops;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use check::{finite_diff_check, numeric_gradient};
pub use ops::sign;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Leaf {
    Param,
    Input(String),
    Constant,
}

/// The primitive operation recorded at a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf(Leaf),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MaxReduce(Var),
    Clip(Var, f64, f64),
    /// Sign with zero derivative; `sign(0) = 0`.
    Sign(Var),
    /// Indicator of `x > 0`, zero derivative.
    StepMask(Var),
    /// Indicator of `lo <= x <= hi`, zero derivative.
    ClipMask(Var, f64, f64),
    /// One-hot at the first maximal entry, zero derivative.
    ArgmaxMask(Var),
    /// Contiguous window of a tensor's flat storage, reshaped.
    Slice {
        src: Var,
        start: usize,
        shape: Vec<usize>,
    },
    /// Writes `src` into a zero vector of length `len` at `start`.
    Scatter { src: Var, start: usize, len: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaxReduce(_) => "max",
            Op::Clip(..) => "clip",
            Op::Sign(_) => "sign",
            Op::StepMask(_) => "step_mask",
            Op::ClipMask(..) => "clip_mask",
            Op::ArgmaxMask(_) => "argmax_mask",
            Op::Slice { .. } => "slice",
            Op::Scatter { .. } => "scatter",
        }
    }

    /// Parent nodes in operand order.
    pub fn parents(&self) -> Parents {
        let (a, b) = match *self {
            Op::Leaf(_) => (None, None),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                (Some(a), Some(b))
            }
            Op::Neg(a)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaxReduce(a)
            | Op::Clip(a, ..)
            | Op::Sign(a)
            | Op::StepMask(a)
            | Op::ClipMask(a, ..)
            | Op::ArgmaxMask(a)
            | Op::Slice { src: a, .. }
            | Op::Scatter { src: a, .. } => (Some(a), None),
        };
        Parents { a, b }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Leaf(_))
    }
}

/// Up to two parent references.
#[derive(Debug, Clone, Copy)]
pub struct Parents {
    a: Option<Var>,
    b: Option<Var>,
}

impl Iterator for Parents {
    type Item = Var;

    fn next(&mut self) -> Option<Var> {
        self.a.take().or_else(|| self.b.take())
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Non-fatal conditions noticed while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// A requested `wrt` node does not influence the output; its gradient is zero.
    UnreachableWrt { node: usize },
}

/// A computation tape. One graph belongs to one thread; independent graphs
/// can be built concurrently.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, Var)>,
    gradient_taped: bool,
    warnings: Vec<Warning>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Whether some backward pass recorded its own computation on this tape.
    pub fn gradient_taped(&self) -> bool {
        self.gradient_taped
    }

    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    pub fn take_warnings(&mut self) -> Vec<Warning> {
        core::mem::take(&mut self.warnings)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let index = self.nodes.len();
        let value = ops::evaluate(&op, index, |v| &self.nodes[v.0].value)?;
        Ok(self.push(op, value))
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf(Leaf::Param), value)
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.push(Op::Leaf(Leaf::Input(name.into())), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf(Leaf::Constant), value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Names `var` as an output returned by [`Graph::forward`].
    pub fn set_output(&mut self, name: &str, var: Var) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.into(), var));
    }

    /// Overwrites the value of a leaf. Downstream nodes are stale until the
    /// next [`Graph::forward`].
    pub fn set_leaf(&mut self, leaf: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        if !node.op.is_leaf() {
            return Err(Error::NotALeaf(leaf.0));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape {
                node: leaf.0,
                op: "leaf",
                detail: alloc::format!(
                    "rebinding shape {:?} with {:?}",
                    node.value.shape(),
                    value.shape()
                ),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Binds named inputs and replays the whole tape, returning the named
    /// outputs. Inputs that are not mentioned keep their current values.
    pub fn forward(&mut self, inputs: &[(&str, Tensor)]) -> Result<Vec<(String, Tensor)>> {
        for (name, value) in inputs {
            let leaf = self
                .nodes
                .iter()
                .position(|n| matches!(&n.op, Op::Leaf(Leaf::Input(s)) if s == name))
                .ok_or_else(|| Error::UnknownInput((*name).into()))?;
            self.set_leaf(Var(leaf), value.clone())?;
        }
        self.replay()?;
        Ok(self
            .outputs
            .iter()
            .map(|(n, v)| (n.clone(), self.nodes[v.0].value.clone()))
            .collect())
    }

    /// Recomputes every non-leaf node in tape order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            node.value = ops::evaluate(&node.op, i, |v| &before[v.0].value)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Neg(a))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    /// Softmax along the last axis (per row for 2-D input).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn max_reduce(&mut self, a: Var) -> Result<Var> {
        self.record(Op::MaxReduce(a))
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.record(Op::Clip(a, lo, hi))
    }

    pub fn sign(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sign(a))
    }

    pub fn slice(&mut self, src: Var, start: usize, shape: &[usize]) -> Result<Var> {
        self.record(Op::Slice {
            src,
            start,
            shape: shape.to_vec(),
        })
    }

    pub fn scatter(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Scatter { src, start, len })
    }

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// With `create_graph` the backward computation stays on the tape and the
    /// returned nodes are differentiable. Without it the backward nodes are
    /// discarded and the results are fresh constants. A `wrt` node that does
    /// not reach `output` gets a zero gradient and a [`Warning`] entry.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let out_shape = self.shape(output).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: out_shape,
            });
        }
        let mark = self.nodes.len();
        let end = output.0 + 1;

        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] {
                needs[i] = self.nodes[i].op.parents().any(|p| needs[p.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if needs[output.0] {
            adjoint[output.0] = Some(self.constant(Tensor::filled(&out_shape, 1.0)));
        }
        for i in (0..end).rev() {
            let Some(upstream) = adjoint[i] else { continue };
            if !needs[i] || self.nodes[i].op.is_leaf() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(Var(i), &op, upstream, &needs)?;
            for (parent, contrib) in contributions {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for w in wrt {
            match adjoint.get(w.0).copied().flatten() {
                Some(g) => grads.push(g),
                None => {
                    self.warnings.push(Warning::UnreachableWrt { node: w.0 });
                    let zeros = Tensor::zeros(self.shape(*w));
                    grads.push(self.constant(zeros));
                }
            }
        }

        if create_graph {
            self.gradient_taped = true;
            return Ok(grads);
        }
        let values: Vec<Tensor> = grads
            .iter()
            .map(|g| self.nodes[g.0].value.clone())
            .collect();
        self.nodes.truncate(mark);
        Ok(values.into_iter().map(|t| self.constant(t)).collect())
    }

    /// Vector-Jacobian products of node `node` (computing `op`) for upstream
    /// adjoint `g`, restricted to parents flagged in `needs`.
    fn vjp(&mut self, node: Var, op: &Op, g: Var, needs: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: Var| needs[v.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf(_) | Op::Sign(_) | Op::StepMask(_) | Op::ClipMask(..) | Op::ArgmaxMask(_) => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, self.unbroadcast(g, a)?));
                }
                if want(b) {
                    out.push((b, self.unbroadcast(g, b)?));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, self.unbroadcast(g, a)?));
                }
                if want(b) {
                    let n = self.neg(g)?;
                    out.push((b, self.unbroadcast(n, b)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let t = self.mul(g, b)?;
                    out.push((a, self.unbroadcast(t, a)?));
                }
                if want(b) {
                    let t = self.mul(g, a)?;
                    out.push((b, self.unbroadcast(t, b)?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    let t = self.div(g, b)?;
                    out.push((a, self.unbroadcast(t, a)?));
                }
                if want(b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(g, node)?;
                    let t = self.div(t, b)?;
                    let t = self.neg(t)?;
                    out.push((b, self.unbroadcast(t, b)?));
                }
            }
            Op::Neg(a) => {
                if want(a) {
                    out.push((a, self.neg(g)?));
                }
            }
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if want(a) {
                    out.push((a, self.transpose(g)?));
                }
            }
            Op::Reshape(a, _) => {
                if want(a) {
                    let shape = self.shape(a).to_vec();
                    out.push((a, self.reshape(g, &shape)?));
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let mask = self.record(Op::StepMask(a))?;
                    out.push((a, self.mul(g, mask)?));
                }
            }
            Op::Tanh(a) => {
                if want(a) {
                    let one = self.scalar(1.0);
                    let sq = self.mul(node, node)?;
                    let d = self.sub(one, sq)?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    out.push((a, self.mul(g, node)?));
                }
            }
            Op::Log(a) => {
                if want(a) {
                    out.push((a, self.div(g, a)?));
                }
            }
            Op::Softmax(a) => {
                if want(a) {
                    // s * (g - rowsum(g * s))
                    let gs = self.mul(g, node)?;
                    let rs = self.row_sum_broadcast(gs)?;
                    let centered = self.sub(g, rs)?;
                    out.push((a, self.mul(node, centered)?));
                }
            }
            Op::LogSoftmax(a) => {
                if want(a) {
                    // g - softmax * rowsum(g)
                    let s = self.exp(node)?;
                    let rs = self.row_sum_broadcast(g)?;
                    let t = self.mul(s, rs)?;
                    out.push((a, self.sub(g, t)?));
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    let ones = self.constant(Tensor::filled(self.shape(a), 1.0));
                    out.push((a, self.mul(ones, g)?));
                }
            }
            Op::Mean(a) => {
                if want(a) {
                    let shape = self.shape(a).to_vec();
                    let n = shape.iter().product::<usize>() as f64;
                    let fill = self.constant(Tensor::filled(&shape, 1.0 / n));
                    out.push((a, self.mul(fill, g)?));
                }
            }
            Op::MaxReduce(a) => {
                if want(a) {
                    let mask = self.record(Op::ArgmaxMask(a))?;
                    out.push((a, self.mul(mask, g)?));
                }
            }
            Op::Clip(a, lo, hi) => {
                if want(a) {
                    let mask = self.record(Op::ClipMask(a, lo, hi))?;
                    out.push((a, self.mul(g, mask)?));
                }
            }
            Op::Slice { src, start, .. } => {
                if want(src) {
                    let len = self.value(src).numel();
                    let flat = self.scatter(g, start, len)?;
                    let shape = self.shape(src).to_vec();
                    let flat = if shape.len() == 1 {
                        flat
                    } else {
                        self.reshape(flat, &shape)?
                    };
                    out.push((src, flat));
                }
            }
            Op::Scatter { src, start, .. } => {
                if want(src) {
                    let shape = self.shape(src).to_vec();
                    out.push((src, self.slice(g, start, &shape)?));
                }
            }
        }
        Ok(out)
    }

    /// Reduces a broadcast adjoint back to the shape of `target`.
    fn unbroadcast(&mut self, g: Var, target: Var) -> Result<Var> {
        let target_shape = self.shape(target).to_vec();
        if self.shape(g) == target_shape.as_slice() {
            return Ok(g);
        }
        let total = self.sum(g)?;
        if target_shape.is_empty() {
            Ok(total)
        } else {
            self.reshape(total, &target_shape)
        }
    }

    /// Each entry replaced by the sum of its row (last axis).
    fn row_sum_broadcast(&mut self, t: Var) -> Result<Var> {
        let shape = self.shape(t).to_vec();
        let cols = *shape.last().ok_or(Error::Empty("row_sum of a scalar"))?;
        let ones = self.constant(Tensor::filled(&[cols, cols], 1.0));
        if shape.len() == 2 {
            self.matmul(t, ones)
        } else {
            let rows = shape.iter().product::<usize>() / cols;
            let t2 = self.reshape(t, &[rows, cols])?;
            let r = self.matmul(t2, ones)?;
            self.reshape(r, &shape)
        }
    }
}
