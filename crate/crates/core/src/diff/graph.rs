use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of jvp and vjp sweeps recorded on a graph.
///
/// Every sweep processes all rows of a batch at once, so for batched inputs
/// the count is also the number of probes spent per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProbeCount {
    pub jvp: usize,
    pub vjp: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Offset(usize, T),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Powf(usize, T),
    Relu(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Broadcast(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Powf(..) => "powf",
            Op::Relu(_) => "relu",
            Op::SumAll(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Broadcast(_) => "broadcast",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Powf(a, _)
            | Op::Relu(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Broadcast(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _, _) => vec![*a],
            Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Rc<Tensor<T>>,
}

/// Recording of one evaluation. Nodes are appended in execution order, so
/// node ids are a topological order.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    first_non_finite: Cell<Option<(usize, &'static str)>>,
    probes: Cell<ProbeCount>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(1024)), first_non_finite: Cell::new(None), probes: Cell::new(ProbeCount::default()) }
    }

    /// Adds an independent value. Whether it is treated as a parameter, an
    /// input or a constant is decided by what it is later differentiated with
    /// respect to.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Op::Leaf, value);
        Var { graph: self, id }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_, T> {
        self.leaf(Tensor::zeros(rows, cols))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn probes(&self) -> ProbeCount {
        self.probes.get()
    }

    /// Fails if any recorded node produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn op(&self, id: usize) -> Op<T> {
        self.nodes.borrow()[id].op.clone()
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_, T> {
        Var { graph: self, id }
    }

    pub(crate) fn bump_jvp(&self) {
        let mut p = self.probes.get();
        p.jvp += 1;
        self.probes.set(p);
    }

    pub(crate) fn bump_vjp(&self) {
        let mut p = self.probes.get();
        p.vjp += 1;
        self.probes.set(p);
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.all_finite() {
            self.first_non_finite.set(Some((id, op.name())));
        }
        nodes.push(Node { op, value: Rc::new(value) });
        id
    }

    /// Evaluates `op` on recorded values and records the result.
    pub(crate) fn apply(&self, op: Op<T>) -> usize {
        let v = |i: usize| self.value(i);
        let value = match &op {
            Op::Leaf => unreachable!("leaves are added with Graph::leaf"),
            Op::Add(a, b) => v(*a).add(&v(*b)),
            Op::Sub(a, b) => v(*a).sub(&v(*b)),
            Op::Mul(a, b) => v(*a).zip_map(&v(*b), |x, y| x * y),
            Op::Div(a, b) => v(*a).zip_map(&v(*b), |x, y| x / y),
            Op::Neg(a) => v(*a).map(|x| -x),
            Op::Scale(a, c) => v(*a).scale(*c),
            Op::Offset(a, c) => v(*a).map(|x| x + *c),
            Op::Exp(a) => v(*a).map(T::exp),
            Op::Log(a) => v(*a).map(T::ln),
            Op::Tanh(a) => v(*a).map(T::tanh),
            Op::Sigmoid(a) => v(*a).map(sigmoid),
            Op::Powf(a, p) => v(*a).map(|x| x.powf(*p)),
            Op::Relu(a) => v(*a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
            Op::SumRows(a) => v(*a).sum_rows(),
            Op::SumCols(a) => v(*a).sum_cols(),
            Op::Broadcast(_) => unreachable!("broadcast carries its target shape"),
            Op::MatMul(a, b) => v(*a).matmul(&v(*b)),
            Op::Transpose(a) => v(*a).transpose(),
            Op::SliceCols(a, s, e) => v(*a).slice_cols(*s, *e),
            Op::ConcatCols(parts) => {
                let vals: Vec<_> = parts.iter().map(|&p| v(p)).collect();
                let refs: Vec<&Tensor<T>> = vals.iter().map(|r| r.as_ref()).collect();
                Tensor::concat_cols(&refs)
            }
        };
        self.push(op, value)
    }

    pub(crate) fn apply_broadcast(&self, a: usize, rows: usize, cols: usize) -> usize {
        let value = self.value(a).broadcast_to(rows, cols);
        self.push(Op::Broadcast(a), value)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [r, c] = self.shape();
        write!(f, "Var(#{}, {r}x{c})", self.id)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    /// Owned copy of the value.
    pub fn tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Value of a 1x1 node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, op: Op<T>) -> Self {
        Var { graph: self.graph, id: self.graph.apply(op) }
    }

    fn binary(self, other: Self, make: fn(usize, usize) -> Op<T>) -> Self {
        debug_assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let [ar, ac] = self.shape();
        let [br, bc] = other.shape();
        let rows = ar.max(br);
        let cols = ac.max(bc);
        let ok = |r: usize, c: usize| (r == rows || r == 1) && (c == cols || c == 1);
        assert!(ok(ar, ac) && ok(br, bc), "incompatible shapes {ar}x{ac} and {br}x{bc}");
        let a = if [ar, ac] == [rows, cols] { self } else { self.broadcast_to(rows, cols) };
        let b = if [br, bc] == [rows, cols] { other } else { other.broadcast_to(rows, cols) };
        Var { graph: self.graph, id: self.graph.apply(make(a.id, b.id)) }
    }

    pub fn broadcast_to(self, rows: usize, cols: usize) -> Self {
        if self.shape() == [rows, cols] {
            return self;
        }
        Var { graph: self.graph, id: self.graph.apply_broadcast(self.id, rows, cols) }
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Log(self.id))
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id))
    }

    pub fn powf(self, p: T) -> Self {
        self.unary(Op::Powf(self.id, p))
    }

    pub fn sqrt(self) -> Self {
        self.powf(T::lit(0.5))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id))
    }

    pub fn scale(self, c: T) -> Self {
        self.unary(Op::Scale(self.id, c))
    }

    pub fn offset(self, c: T) -> Self {
        self.unary(Op::Offset(self.id, c))
    }

    /// `c - self`.
    pub fn rsub(self, c: T) -> Self {
        (-self).offset(c)
    }

    /// Elementwise `|x|`, with the sign held constant.
    pub fn abs(self) -> Self {
        let sign = self.value().map(|x| x.signum() * if x == T::zero() { T::zero() } else { T::one() });
        self * self.graph.constant(sign)
    }

    /// `log(1 + exp(x))` in a form that does not overflow.
    pub fn softplus(self) -> Self {
        self.relu() + (-self.abs()).exp().offset(T::one()).ln()
    }

    pub fn sum(self) -> Self {
        self.unary(Op::SumAll(self.id))
    }

    pub fn mean(self) -> Self {
        let n = T::from_usize_lossy(self.value().len());
        self.sum().scale(T::one() / n)
    }

    /// Sum over rows: `m x n -> 1 x n`.
    pub fn sum_rows(self) -> Self {
        self.unary(Op::SumRows(self.id))
    }

    /// Sum over columns: `m x n -> m x 1`.
    pub fn sum_cols(self) -> Self {
        self.unary(Op::SumCols(self.id))
    }

    pub fn matmul(self, rhs: Self) -> Self {
        let [_, k] = self.shape();
        let [k2, _] = rhs.shape();
        assert_eq!(k, k2, "matmul inner dimensions {k} and {k2}");
        Var { graph: self.graph, id: self.graph.apply(Op::MatMul(self.id, rhs.id)) }
    }

    pub fn t(self) -> Self {
        self.unary(Op::Transpose(self.id))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Self {
        if start == 0 && end == self.cols() {
            return self;
        }
        self.unary(Op::SliceCols(self.id, start, end))
    }

    pub fn col(self, j: usize) -> Self {
        self.slice_cols(j, j + 1)
    }

    pub fn concat_cols(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let g = parts[0].graph;
        Var { graph: g, id: g.apply(Op::ConcatCols(parts.iter().map(|p| p.id).collect())) }
    }

    /// Gathers arbitrary columns, in order.
    pub fn select_cols(self, idx: &[usize]) -> Self {
        // contiguous ranges keep the graph small
        if idx.windows(2).all(|w| w[1] == w[0] + 1) && !idx.is_empty() {
            return self.slice_cols(idx[0], idx[idx.len() - 1] + 1);
        }
        let parts: Vec<_> = idx.iter().map(|&j| self.col(j)).collect();
        Self::concat_cols(&parts)
    }
}

impl<'g, T: Scalar> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add)
    }
}

impl<'g, T: Scalar> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub)
    }
}

impl<'g, T: Scalar> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul)
    }
}

impl<'g, T: Scalar> Div for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Div)
    }
}

impl<'g, T: Scalar> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self {
        self.unary(Op::Neg(self.id))
    }
}

impl<'g, T: Scalar> Add<T> for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, c: T) -> Self {
        self.offset(c)
    }
}

impl<'g, T: Scalar> Sub<T> for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, c: T) -> Self {
        self.offset(-c)
    }
}

impl<'g, T: Scalar> Mul<T> for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, c: T) -> Self {
        self.scale(c)
    }
}

impl<'g, T: Scalar> Div<T> for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, c: T) -> Self {
        self.scale(T::one() / c)
    }
}
