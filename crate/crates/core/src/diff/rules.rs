//! Forward and reverse sweeps. Both emit ordinary graph nodes, which is what
//! makes derivatives of derivatives available.

use super::graph::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn relu_mask<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { T::one() } else { T::zero() })
}

fn add_opt<'g, T: Scalar>(acc: Option<Var<'g, T>>, v: Var<'g, T>) -> Var<'g, T> {
    match acc {
        Some(a) => a + v,
        None => v,
    }
}

impl<T: Scalar> Graph<T> {
    /// Pushes `tangents` (one per `wrt` node) forward to `outputs`.
    ///
    /// Each call counts as one jvp probe. Nodes listed in `wrt` are treated as
    /// independent variables even when they were computed from other nodes.
    pub fn jvp<'g>(&'g self, outputs: &[Var<'g, T>], wrt: &[Var<'g, T>], tangents: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        if wrt.len() != tangents.len() {
            return Err(Error::shape(format!("{} inputs but {} tangents", wrt.len(), tangents.len())));
        }
        for (w, t) in wrt.iter().zip(tangents) {
            if w.shape() != t.shape() {
                return Err(Error::shape(format!("tangent {:?} does not match input {:?}", t.shape(), w.shape())));
            }
        }
        self.bump_jvp();
        let Some(start) = wrt.iter().map(|w| w.id()).min() else {
            return Ok(outputs.iter().map(|o| self.zeros(o.rows(), o.cols())).collect());
        };
        let end = outputs.iter().map(|o| o.id()).max().unwrap_or(start).max(start);
        let mut tan: Vec<Option<Var<'g, T>>> = vec![None; end - start + 1];
        let mut is_wrt = vec![false; end - start + 1];
        for (w, t) in wrt.iter().zip(tangents) {
            let k = w.id() - start;
            is_wrt[k] = true;
            tan[k] = Some(add_opt(tan[k], *t));
        }
        for id in start..=end {
            let k = id - start;
            if is_wrt[k] {
                continue;
            }
            let op = self.op(id);
            let get = |i: usize| if i >= start { tan[i - start] } else { None };
            tan[k] = self.jvp_rule(id, &op, get);
        }
        Ok(outputs
            .iter()
            .map(|o| match o.id().checked_sub(start).and_then(|k| tan[k]) {
                Some(t) => t,
                None => self.zeros(o.rows(), o.cols()),
            })
            .collect())
    }

    /// Pulls `cotangent` back from `output` to each node in `wrt`.
    ///
    /// Each call counts as one vjp probe.
    pub fn vjp<'g>(&'g self, output: Var<'g, T>, cotangent: Var<'g, T>, wrt: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        if output.shape() != cotangent.shape() {
            return Err(Error::shape(format!("cotangent {:?} does not match output {:?}", cotangent.shape(), output.shape())));
        }
        self.bump_vjp();
        let end = output.id();
        let Some(start) = wrt.iter().map(|w| w.id()).filter(|&i| i <= end).min() else {
            return Ok(wrt.iter().map(|w| self.zeros(w.rows(), w.cols())).collect());
        };
        let n = end - start + 1;
        let mut reach = vec![false; n];
        for w in wrt {
            if w.id() <= end {
                reach[w.id() - start] = true;
            }
        }
        for id in start..=end {
            let k = id - start;
            if !reach[k] {
                reach[k] = self.op(id).inputs().iter().any(|&i| i >= start && reach[i - start]);
            }
        }
        let mut adj: Vec<Option<Var<'g, T>>> = vec![None; n];
        adj[n - 1] = Some(cotangent);
        for id in (start..=end).rev() {
            let k = id - start;
            let Some(gy) = adj[k] else { continue };
            if !reach[k] {
                continue;
            }
            let op = self.op(id);
            let needs = |i: usize| i >= start && reach[i - start];
            for (input, contrib) in self.vjp_rule(id, &op, gy, needs) {
                let j = input - start;
                adj[j] = Some(add_opt(adj[j], contrib));
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match w.id().checked_sub(start).filter(|&k| k < n).and_then(|k| adj[k]) {
                Some(a) => a,
                None => self.zeros(w.rows(), w.cols()),
            })
            .collect())
    }

    fn jvp_rule<'g>(&'g self, id: usize, op: &Op<T>, tan: impl Fn(usize) -> Option<Var<'g, T>>) -> Option<Var<'g, T>> {
        let v = |i: usize| self.var(i);
        let y = v(id);
        match *op {
            Op::Leaf => None,
            Op::Add(a, b) => match (tan(a), tan(b)) {
                (None, None) => None,
                (Some(ta), None) => Some(ta),
                (None, Some(tb)) => Some(tb),
                (Some(ta), Some(tb)) => Some(ta + tb),
            },
            Op::Sub(a, b) => match (tan(a), tan(b)) {
                (None, None) => None,
                (Some(ta), None) => Some(ta),
                (None, Some(tb)) => Some(-tb),
                (Some(ta), Some(tb)) => Some(ta - tb),
            },
            Op::Mul(a, b) => {
                let l = tan(a).map(|ta| ta * v(b));
                let r = tan(b).map(|tb| v(a) * tb);
                sum2(l, r)
            }
            Op::Div(a, b) => {
                let l = tan(a).map(|ta| ta / v(b));
                let r = tan(b).map(|tb| -(y * tb / v(b)));
                sum2(l, r)
            }
            Op::Neg(a) => tan(a).map(|t| -t),
            Op::Scale(a, c) => tan(a).map(|t| t.scale(c)),
            Op::Offset(a, _) => tan(a),
            Op::Exp(a) => tan(a).map(|t| t * y),
            Op::Log(a) => tan(a).map(|t| t / v(a)),
            Op::Tanh(a) => tan(a).map(|t| t * (y * y).rsub(T::one())),
            Op::Sigmoid(a) => tan(a).map(|t| t * (y * y.rsub(T::one()))),
            Op::Powf(a, p) => tan(a).map(|t| t * v(a).powf(p - T::one()).scale(p)),
            Op::Relu(a) => tan(a).map(|t| t * self.constant(relu_mask(&v(a).value()))),
            Op::SumAll(a) => tan(a).map(|t| t.sum()),
            Op::SumRows(a) => tan(a).map(|t| t.sum_rows()),
            Op::SumCols(a) => tan(a).map(|t| t.sum_cols()),
            Op::Broadcast(a) => {
                let [r, c] = y.shape();
                tan(a).map(|t| t.broadcast_to(r, c))
            }
            Op::MatMul(a, b) => {
                let l = tan(a).map(|ta| ta.matmul(v(b)));
                let r = tan(b).map(|tb| v(a).matmul(tb));
                sum2(l, r)
            }
            Op::Transpose(a) => tan(a).map(|t| t.t()),
            Op::SliceCols(a, s, e) => tan(a).map(|t| t.slice_cols(s, e)),
            Op::ConcatCols(ref parts) => {
                let ts: Vec<_> = parts.iter().map(|&p| tan(p)).collect();
                if ts.iter().all(Option::is_none) {
                    return None;
                }
                let filled: Vec<_> = parts
                    .iter()
                    .zip(ts)
                    .map(|(&p, t)| t.unwrap_or_else(|| {
                        let [r, c] = v(p).shape();
                        self.zeros(r, c)
                    }))
                    .collect();
                Some(Var::concat_cols(&filled))
            }
        }
    }

    fn vjp_rule<'g>(&'g self, id: usize, op: &Op<T>, gy: Var<'g, T>, needs: impl Fn(usize) -> bool) -> Vec<(usize, Var<'g, T>)> {
        let v = |i: usize| self.var(i);
        let y = v(id);
        let mut out = Vec::with_capacity(2);
        let mut push = |i: usize, f: &dyn Fn() -> Var<'g, T>| {
            if needs(i) {
                out.push((i, f()));
            }
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, &|| gy);
                push(b, &|| gy);
            }
            Op::Sub(a, b) => {
                push(a, &|| gy);
                push(b, &|| -gy);
            }
            Op::Mul(a, b) => {
                push(a, &|| gy * v(b));
                push(b, &|| gy * v(a));
            }
            Op::Div(a, b) => {
                push(a, &|| gy / v(b));
                push(b, &|| -(gy * y / v(b)));
            }
            Op::Neg(a) => push(a, &|| -gy),
            Op::Scale(a, c) => push(a, &|| gy.scale(c)),
            Op::Offset(a, _) => push(a, &|| gy),
            Op::Exp(a) => push(a, &|| gy * y),
            Op::Log(a) => push(a, &|| gy / v(a)),
            Op::Tanh(a) => push(a, &|| gy * (y * y).rsub(T::one())),
            Op::Sigmoid(a) => push(a, &|| gy * (y * y.rsub(T::one()))),
            Op::Powf(a, p) => push(a, &|| gy * v(a).powf(p - T::one()).scale(p)),
            Op::Relu(a) => push(a, &|| gy * self.constant(relu_mask(&v(a).value()))),
            Op::SumAll(a) | Op::SumRows(a) | Op::SumCols(a) => {
                let [r, c] = v(a).shape();
                push(a, &|| gy.broadcast_to(r, c));
            }
            Op::Broadcast(a) => {
                let [r, c] = v(a).shape();
                push(a, &|| {
                    let [gr, gc] = gy.shape();
                    let mut g = gy;
                    if r == 1 && gr != 1 {
                        g = g.sum_rows();
                    }
                    if c == 1 && gc != 1 {
                        g = g.sum_cols();
                    }
                    g
                });
            }
            Op::MatMul(a, b) => {
                push(a, &|| gy.matmul(v(b).t()));
                push(b, &|| v(a).t().matmul(gy));
            }
            Op::Transpose(a) => push(a, &|| gy.t()),
            Op::SliceCols(a, s, e) => {
                let [r, c] = v(a).shape();
                push(a, &|| {
                    let mut parts = Vec::with_capacity(3);
                    if s > 0 {
                        parts.push(self.zeros(r, s));
                    }
                    parts.push(gy);
                    if e < c {
                        parts.push(self.zeros(r, c - e));
                    }
                    Var::concat_cols(&parts)
                });
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = v(p).cols();
                    let s = off;
                    push(p, &|| gy.slice_cols(s, s + w));
                    off += w;
                }
            }
        }
        out
    }
}

fn sum2<'g, T: Scalar>(a: Option<Var<'g, T>>, b: Option<Var<'g, T>>) -> Option<Var<'g, T>> {
    match (a, b) {
        (None, None) => None,
        (Some(x), None) | (None, Some(x)) => Some(x),
        (Some(x), Some(y)) => Some(x + y),
    }
}
