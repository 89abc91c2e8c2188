//! Define-by-run reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns exact gradients for the requested handles. The tape itself is not
//! consumed, so several backward passes over different outputs may share one
//! forward pass.
//!
//! Tensors are at most rank 2 and stored row-major in `f64`. Binary
//! elementwise operations broadcast along size-1 dimensions; a rank-1 tensor
//! of length `n` behaves like a `1 x n` row.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            Shape::Scalar => 0,
            Shape::Vector(_) => 1,
            Shape::Matrix(..) => 2,
        }
    }

    /// `(rows, cols)` view used for broadcasting and matmul.
    pub fn dims2(self) -> (usize, usize) {
        match self {
            Shape::Scalar => (1, 1),
            Shape::Vector(n) => (1, n),
            Shape::Matrix(r, c) => (r, c),
        }
    }

    fn from_dims2(rank: usize, rows: usize, cols: usize) -> Shape {
        match rank {
            0 => Shape::Scalar,
            1 => Shape::Vector(cols),
            _ => Shape::Matrix(rows, cols),
        }
    }

    /// Result shape of broadcasting `self` against `other`, if compatible.
    pub fn broadcast(self, other: Shape) -> Option<Shape> {
        let (ar, ac) = self.dims2();
        let (br, bc) = other.dims2();
        let dim = |x: usize, y: usize| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        };
        let rows = dim(ar, br)?;
        let cols = dim(ac, bc)?;
        let rank = self.rank().max(other.rank());
        if rank < 2 && rows != 1 {
            return None;
        }
        Some(Shape::from_dims2(rank, rows, cols))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "[]"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}, {c}]"),
        }
    }
}

/// Dense row-major tensor of rank 0, 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: Shape::Scalar,
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::Vector(data.len()),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn rows(&self) -> usize {
        self.shape.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.shape.dims2().1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Square,
    Softplus,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Square => "square",
            UnaryOp::Softplus => "softplus",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Square => x * x,
            UnaryOp::Softplus => softplus(x),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Broadcast(usize),
    Select(Vec<bool>, usize, usize),
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of operations. Single-threaded; build one per step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(64)),
            check_finite: Cell::new(true),
        }
    }

    /// Turns NaN/Inf detection at op boundaries on or off.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, op: Op, value: Tensor, inputs: &[usize]) -> Result<Var<'_>> {
        if self.check_finite.get() && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(op, value, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn owns(&self, var: &Var<'_>) -> bool {
        std::ptr::eq(self, var.tape) && var.id < self.len()
    }

    /// Reverse-mode gradient of the scalar `output` with respect to `wrt`.
    ///
    /// Handles that do not influence `output` get a zero gradient. The tape is
    /// left untouched, so repeated calls are allowed.
    pub fn backward(&self, output: &Var<'_>, wrt: &[Var<'_>]) -> Result<GradientMap> {
        if !self.owns(output) {
            return Err(Error::ForeignHandle(output.id));
        }
        if let Some(v) = wrt.iter().find(|v| !self.owns(v)) {
            return Err(Error::ForeignHandle(v.id));
        }
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if out_shape.numel() != 1 {
            return Err(Error::NotScalar(out_shape));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        adj[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            propagate(&nodes, node, &g, &mut adj);
        }

        let grads = wrt
            .iter()
            .map(|v| {
                let shape = nodes[v.id].value.shape();
                let data = adj
                    .get(v.id)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| vec![0.0; shape.numel()]);
                (v.id, Tensor { shape, data })
            })
            .collect();
        Ok(GradientMap { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (ga, gb): (Option<Vec<f64>>, Option<Vec<f64>>) = match kind {
                BinaryOp::Add => (Some(g.to_vec()), Some(g.to_vec())),
                BinaryOp::Sub => (Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())),
                BinaryOp::Mul => {
                    let ea = expand(ta, out.shape());
                    let eb = expand(tb, out.shape());
                    (
                        Some(g.iter().zip(eb.iter()).map(|(g, y)| g * y).collect()),
                        Some(g.iter().zip(ea.iter()).map(|(g, x)| g * x).collect()),
                    )
                }
                BinaryOp::Div => {
                    let eb = expand(tb, out.shape());
                    let ga: Vec<f64> = g.iter().zip(eb.iter()).map(|(g, y)| g / y).collect();
                    let gb = ga.iter().zip(out.data()).map(|(q, o)| -q * o).collect();
                    (Some(ga), Some(gb))
                }
            };
            if let Some(ga) = ga {
                accumulate(adj, nodes, *a, reduce_to(&ga, out.shape(), ta.shape()));
            }
            if let Some(gb) = gb {
                accumulate(adj, nodes, *b, reduce_to(&gb, out.shape(), tb.shape()));
            }
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let ga: Vec<f64> = match kind {
                UnaryOp::Neg => g.iter().map(|g| -g).collect(),
                UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                UnaryOp::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                UnaryOp::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                UnaryOp::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                UnaryOp::Softplus => g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect(),
            };
            accumulate(adj, nodes, *a, ga);
        }
        Op::Scale(a, c) => accumulate(adj, nodes, *a, g.iter().map(|g| g * c).collect()),
        Op::Shift(a) | Op::Reshape(a) => accumulate(adj, nodes, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = ta.shape().dims2();
            let n = tb.cols();
            if nodes[*a].requires_grad {
                // dA = G Bᵀ
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), &mut ga);
                accumulate(adj, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ G
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), &mut gb);
                accumulate(adj, nodes, *b, gb);
            }
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            accumulate(adj, nodes, *a, vec![g[0]; len]);
        }
        Op::Mean(a) => {
            let len = nodes[*a].value.len();
            accumulate(adj, nodes, *a, vec![g[0] / len as f64; len]);
        }
        Op::SumCols(a) => {
            let (r, c) = nodes[*a].value.shape().dims2();
            let mut ga = Vec::with_capacity(r * c);
            for gi in g.iter().take(r) {
                ga.extend(std::iter::repeat_n(*gi, c));
            }
            accumulate(adj, nodes, *a, ga);
        }
        Op::Broadcast(a) => {
            let target = nodes[*a].value.shape();
            accumulate(adj, nodes, *a, reduce_to(g, out.shape(), target));
        }
        Op::Select(mask, a, b) => {
            let ga = g.iter().zip(mask).map(|(g, &m)| if m { *g } else { 0.0 }).collect();
            let gb = g.iter().zip(mask).map(|(g, &m)| if m { 0.0 } else { *g }).collect();
            accumulate(adj, nodes, *a, ga);
            accumulate(adj, nodes, *b, gb);
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: the slices cover every index addressed by the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Materializes `t` broadcast to `shape`.
fn expand(t: &Tensor, shape: Shape) -> std::borrow::Cow<'_, [f64]> {
    if t.shape().numel() == shape.numel() {
        return std::borrow::Cow::Borrowed(t.data());
    }
    let (r, c) = shape.dims2();
    let (tr, tc) = t.shape().dims2();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ri = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let cj = if tc == 1 { 0 } else { j };
            out.push(t.data[ri * tc + cj]);
        }
    }
    std::borrow::Cow::Owned(out)
}

/// Sums a gradient of shape `from` down to the broadcast source shape `to`.
fn reduce_to(g: &[f64], from: Shape, to: Shape) -> Vec<f64> {
    if from.numel() == to.numel() {
        return g.to_vec();
    }
    let (r, c) = from.dims2();
    let (tr, tc) = to.dims2();
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let ri = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let cj = if tc == 1 { 0 } else { j };
            out[ri * tc + cj] += g[i * c + j];
        }
    }
    out
}

fn broadcast_binary(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        return a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && a.len() == out.numel() {
        let y = b.data[0];
        return a.data.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 && b.len() == out.numel() {
        let x = a.data[0];
        return b.data.iter().map(|&y| f(x, y)).collect();
    }
    let ea = expand(a, out);
    let eb = expand(b, out);
    ea.iter().zip(eb.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Shape {
        self.tape.value(self.id).shape()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data[0]
    }

    /// A constant copy of this value, cut off from the gradient.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn binary(&self, other: &Var<'t>, kind: BinaryOp) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let out = a.shape().broadcast(b.shape()).ok_or(Error::ShapeMismatch {
                op: kind.name(),
                lhs: a.shape(),
                rhs: b.shape(),
            })?;
            Tensor {
                shape: out,
                data: broadcast_binary(&a, &b, out, |x, y| kind.apply(x, y)),
            }
        };
        self.tape
            .record(kind.name(), Op::Binary(kind, self.id, other.id), value, &[self.id, other.id])
    }

    fn unary(&self, kind: UnaryOp) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|x| kind.apply(x));
        self.tape.record(kind.name(), Op::Unary(kind, self.id), value, &[self.id])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Square)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Softplus)
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|x| c * x);
        self.tape.record("scale", Op::Scale(self.id, c), value, &[self.id])
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&self, c: f64) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).map(|x| x + c);
        self.tape.record("shift", Op::Shift(self.id), value, &[self.id])
    }

    /// Matrix product. A rank-1 left operand of length `k` is treated as `1 x k`
    /// and yields a rank-1 result.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let mismatch = || Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            };
            let (m, k) = match a.shape() {
                Shape::Scalar => return Err(mismatch()),
                s => s.dims2(),
            };
            let (k2, n) = match b.shape() {
                Shape::Matrix(r, c) => (r, c),
                _ => return Err(mismatch()),
            };
            if k != k2 {
                return Err(mismatch());
            }
            let mut data = vec![0.0; m * n];
            gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1), &mut data);
            let shape = match a.shape() {
                Shape::Vector(_) => Shape::Vector(n),
                _ => Shape::Matrix(m, n),
            };
            Tensor { shape, data }
        };
        self.tape
            .record("matmul", Op::MatMul(self.id, other.id), value, &[self.id, other.id])
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).data.iter().sum();
        self.tape.record("sum", Op::Sum(self.id), Tensor::scalar(s), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let value = {
            let t = self.tape.value(self.id);
            Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64)
        };
        self.tape.record("mean", Op::Mean(self.id), value, &[self.id])
    }

    /// Row sums: `[r, c] -> [r]`. A rank-1 input sums to a length-1 vector.
    pub fn sum_cols(&self) -> Result<Var<'t>> {
        let value = {
            let t = self.tape.value(self.id);
            let (r, c) = t.shape().dims2();
            let data = (0..r).map(|i| t.data[i * c..(i + 1) * c].iter().sum()).collect();
            Tensor {
                shape: Shape::Vector(r),
                data,
            }
        };
        self.tape.record("sum_cols", Op::SumCols(self.id), value, &[self.id])
    }

    pub fn broadcast_to(&self, shape: Shape) -> Result<Var<'t>> {
        let value = {
            let t = self.tape.value(self.id);
            if t.shape().broadcast(shape) != Some(shape) {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: t.shape(),
                    rhs: shape,
                });
            }
            Tensor {
                shape,
                data: expand(&t, shape).into_owned(),
            }
        };
        self.tape.record("broadcast", Op::Broadcast(self.id), value, &[self.id])
    }

    /// Elementwise `if mask { self } else { other }`; shapes must match.
    pub fn select(&self, mask: &[bool], other: &Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape() != b.shape() || mask.len() != a.len() {
                return Err(Error::ShapeMismatch {
                    op: "select",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            let data = mask
                .iter()
                .zip(a.data.iter().zip(&b.data))
                .map(|(&m, (&x, &y))| if m { x } else { y })
                .collect();
            Tensor { shape: a.shape, data }
        };
        self.tape.record(
            "select",
            Op::Select(mask.to_vec(), self.id, other.id),
            value,
            &[self.id, other.id],
        )
    }

    pub fn reshape(&self, shape: Shape) -> Result<Var<'t>> {
        let value = {
            let t = self.tape.value(self.id);
            if t.len() != shape.numel() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: t.shape(),
                    rhs: shape,
                });
            }
            Tensor {
                shape,
                data: t.data.clone(),
            }
        };
        self.tape.record("reshape", Op::Reshape(self.id), value, &[self.id])
    }

    /// `log σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(&self) -> Result<Var<'t>> {
        self.neg()?.softplus()?.neg()
    }

    pub fn add_const(&self, t: Tensor) -> Result<Var<'t>> {
        self.add(&self.tape.constant(t))
    }

    pub fn mul_const(&self, t: Tensor) -> Result<Var<'t>> {
        self.mul(&self.tape.constant(t))
    }
}

/// Gradients returned by [`Tape::backward`], in the order the handles were requested.
#[derive(Clone, Debug)]
pub struct GradientMap {
    grads: Vec<(usize, Tensor)>,
}

impl GradientMap {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.iter().find(|(id, _)| *id == var.id).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter().map(|(_, g)| g)
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.grads.into_iter().map(|(_, g)| g).collect()
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        x[i] = at[i] + h;
        let up = f(&x);
        x[i] = at[i] - h;
        let down = f(&x);
        x[i] = at[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteObjective { coord: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec3(t: &Tape, a: [f64; 3]) -> Var<'_> {
        t.param(Tensor::vector(a.to_vec()))
    }

    #[test]
    fn elementwise_mul() {
        let t = Tape::new();
        let x = vec3(&t, [1.0, 2.0, 3.0]);
        let y = vec3(&t, [4.0, 5.0, 6.0]);
        assert_eq!(x.mul(&y).unwrap().value().data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let t = Tape::new();
        let z = t.param(Tensor::scalar(0.0));
        let s = z.sigmoid().unwrap();
        assert_eq!(s.item(), 0.5);
        let g = t.backward(&s, &[z]).unwrap();
        assert_eq!(g.get(&z).unwrap().item(), 0.25);
    }

    #[test]
    fn matmul_by_hand() {
        let t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = t.constant(Tensor::matrix(3, 1, vec![7.0, 8.0, 9.0]).unwrap());
        let c = a.matmul(&b).unwrap().value();
        assert_eq!(c.shape(), Shape::Matrix(2, 1));
        assert_eq!(c.data(), &[7.0 + 16.0 + 27.0, 28.0 + 40.0 + 54.0]);
    }

    #[test]
    fn square_derivative() {
        let t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        assert_eq!(t.backward(&y, &[x]).unwrap().get(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = x.add(&y).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "add",
                lhs: Shape::Vector(2),
                rhs: Shape::Vector(3)
            }
        );
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tape::new();
        let x = t.param(Tensor::scalar(-1.0));
        assert_eq!(x.log().unwrap_err(), Error::NonFinite { op: "log" });
        t.set_check_finite(false);
        assert!(x.log().unwrap().item().is_nan());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let t = Tape::new();
        let x = vec3(&t, [1.0, 2.0, 3.0]);
        assert!(matches!(t.backward(&x, &[x]), Err(Error::NotScalar(_))));
        let other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(t.backward(&y, &[x]), Err(Error::ForeignHandle(_))));
        let s = x.sum().unwrap();
        assert!(matches!(t.backward(&s, &[y]), Err(Error::ForeignHandle(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let t = Tape::new();
        let x = vec3(&t, [1.0, 2.0, 3.0]);
        let unused = t.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let s = x.sum().unwrap();
        let g = t.backward(&s, &[x, unused]).unwrap();
        assert_eq!(g.get(&unused).unwrap(), &Tensor::zeros(Shape::Matrix(2, 2)));
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let t = Tape::new();
        let m = t.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let row = t.param(Tensor::vector(vec![1.0, 10.0, 100.0]));
        let s = t.param(Tensor::scalar(2.0));
        let y = m.mul(&row).unwrap().mul(&s).unwrap().sum().unwrap();
        let g = t.backward(&y, &[m, row, s]).unwrap();
        assert_eq!(g.get(&row).unwrap().data(), &[10.0, 14.0, 18.0]);
        assert_eq!(g.get(&m).unwrap().data(), &[2.0, 20.0, 200.0, 2.0, 20.0, 200.0]);
        assert_eq!(g.get(&s).unwrap().item(), 5.0 + 7.0 * 10.0 + 9.0 * 100.0);
    }

    #[test]
    fn tape_is_reusable() {
        let t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let a = x.square().unwrap();
        let b = x.exp().unwrap();
        let ga = t.backward(&a, &[x]).unwrap();
        let gb = t.backward(&b, &[x]).unwrap();
        let ga2 = t.backward(&a, &[x]).unwrap();
        assert_eq!(ga.get(&x).unwrap().item(), 4.0);
        assert_eq!(gb.get(&x).unwrap().item(), 2f64.exp());
        assert_eq!(ga.get(&x), ga2.get(&x));
    }

    #[test]
    fn select_routes_gradient() {
        let t = Tape::new();
        let a = vec3(&t, [1.0, 2.0, 3.0]);
        let b = vec3(&t, [4.0, 5.0, 6.0]);
        let y = a.select(&[true, false, true], &b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 5.0, 3.0]);
        let g = t.backward(&y.sum().unwrap(), &[a, b]).unwrap();
        assert_eq!(g.get(&a).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_gradient(|x| sigmoid(x[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-10);
        assert!(finite_diff_gradient(|x| x[0], &[0.0], 0.0).is_err());
        assert_eq!(
            finite_diff_gradient(|x| 1.0 / x[0], &[1e-6], 1e-6).unwrap_err(),
            Error::NonFiniteObjective { coord: 0 }
        );
    }

    #[test]
    fn stable_scalar_helpers() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((logit(sigmoid(3.0)) - 3.0).abs() < 1e-12);
        assert_eq!(sigmoid(-800.0), 0.0);
    }
}
