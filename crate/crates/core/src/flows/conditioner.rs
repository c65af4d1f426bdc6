use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Residual MLP shape: an input projection, `blocks` residual blocks of
/// width `hidden`, and a linear read-out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self { hidden: 32, blocks: 2 }
    }
}

impl NetSpec {
    /// Parameter shapes for a net from `inp` to `out` features. With no
    /// inputs the net degenerates to a learned constant.
    pub fn shapes(&self, inp: usize, out: usize) -> Vec<[usize; 2]> {
        if inp == 0 {
            return vec![[1, out]];
        }
        let h = self.hidden;
        let mut s = vec![[inp, h], [1, h]];
        for _ in 0..self.blocks {
            s.push([h, h]);
            s.push([1, h]);
        }
        s.push([h, out]);
        s.push([1, out]);
        s
    }

    /// Random hidden weights, zero read-out (so a fresh coupling starts at its
    /// transformer's zero-parameter point). `out_bias` seeds the read-out bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, inp: usize, out_bias: &[f64], rng: &mut R) -> Vec<Tensor<T>> {
        let out = out_bias.len();
        let bias = Tensor::from_fn(1, out, |_, j| T::lit(out_bias[j]));
        if inp == 0 {
            return vec![bias];
        }
        let h = self.hidden;
        let mut gauss = |r: usize, c: usize, scale: f64| Tensor::from_fn(r, c, |_, _| { let e: f64 = StandardNormal.sample(&mut *rng); T::lit(scale * e) });
        let mut p = vec![gauss(inp, h, 1.0 / (inp as f64).sqrt()), Tensor::zeros(1, h)];
        for _ in 0..self.blocks {
            p.push(gauss(h, h, 0.5 / (h as f64).sqrt()));
            p.push(Tensor::zeros(1, h));
        }
        p.push(Tensor::zeros(h, out));
        p.push(bias);
        p
    }

    /// Records the net on a `B x inp` input; `rows` is needed when `inp == 0`.
    pub fn record<'g, T: Scalar>(&self, p: &[Var<'g, T>], x: Var<'g, T>, rows: usize) -> Var<'g, T> {
        if p.len() == 1 {
            let out = p[0].cols();
            return p[0].broadcast_to(rows, out);
        }
        let mut h = x.matmul(p[0]) + p[1];
        for b in 0..self.blocks {
            let (w, c) = (p[2 + 2 * b], p[3 + 2 * b]);
            h = h + (h.matmul(w) + c).tanh();
        }
        let n = p.len();
        h.tanh().matmul(p[n - 2]) + p[n - 1]
    }
}
