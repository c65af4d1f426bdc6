use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::conditioner::NetSpec;
use super::coupling;
use crate::diff::Var;
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_bins() -> usize {
    8
}

fn default_bound() -> f64 {
    4.0
}

fn default_true() -> bool {
    true
}

/// Structure of one layer. Parameters live separately in [`FlowLayer`];
/// everything here is fixed for the layer's lifetime.
///
/// Every layer maps latent-side inputs (`in_dim`) to data-side outputs
/// (`out_dim`). Coupling layers split their coordinates into two contiguous
/// halves of sizes `ceil(d/2)` and `floor(d/2)`; even `parity` transforms the
/// second half conditioned on the first, odd parity the reverse. A
/// one-dimensional coupling transforms its only coordinate with learned
/// constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    ActNorm {
        dim: usize,
    },
    AffineCoupling {
        dim: usize,
        parity: usize,
        #[serde(default)]
        net: NetSpec,
    },
    MixtureCdfCoupling {
        dim: usize,
        parity: usize,
        components: usize,
        /// Follow the CDF with a logit and a learned affine map; without it
        /// the layer's outputs lie in `(0, 1)`.
        #[serde(default = "default_true")]
        logit_output: bool,
        #[serde(default)]
        net: NetSpec,
    },
    RqSplineCoupling {
        dim: usize,
        parity: usize,
        #[serde(default = "default_bins")]
        bins: usize,
        #[serde(default = "default_bound")]
        bound: f64,
        #[serde(default)]
        net: NetSpec,
    },
    /// `x = P^T L U z` with unit lower `L` and `U` having diagonal
    /// `sign * exp(log_s)`. An empty `perm` asks for a random orthogonal
    /// initialisation, which fills `perm` and `sign`.
    InvertibleLinear {
        dim: usize,
        #[serde(default)]
        perm: Vec<usize>,
        #[serde(default)]
        sign: Vec<f64>,
    },
    Logit {
        dim: usize,
    },
    ShiftScale {
        dim: usize,
    },
    /// Injective embedding `z -> (z, 0)`; its left inverse keeps the first
    /// `latent_dim` coordinates.
    Slice {
        latent_dim: usize,
        data_dim: usize,
    },
}

pub(crate) fn split(dim: usize, parity: usize) -> (Range<usize>, Range<usize>) {
    if dim == 1 {
        return (0..0, 0..1);
    }
    let s = dim.div_ceil(2);
    if parity % 2 == 0 {
        (0..s, s..dim)
    } else {
        (s..dim, 0..s)
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::ActNorm { .. } => "act-norm",
            LayerSpec::AffineCoupling { .. } => "affine-coupling",
            LayerSpec::MixtureCdfCoupling { .. } => "mixture-cdf-coupling",
            LayerSpec::RqSplineCoupling { .. } => "rq-spline-coupling",
            LayerSpec::InvertibleLinear { .. } => "invertible-linear",
            LayerSpec::Logit { .. } => "logit",
            LayerSpec::ShiftScale { .. } => "shift-scale",
            LayerSpec::Slice { .. } => "slice",
        }
    }

    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Slice { latent_dim, .. } => latent_dim,
            LayerSpec::ActNorm { dim }
            | LayerSpec::AffineCoupling { dim, .. }
            | LayerSpec::MixtureCdfCoupling { dim, .. }
            | LayerSpec::RqSplineCoupling { dim, .. }
            | LayerSpec::InvertibleLinear { dim, .. }
            | LayerSpec::Logit { dim }
            | LayerSpec::ShiftScale { dim } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Slice { data_dim, .. } => data_dim,
            _ => self.in_dim(),
        }
    }

    fn coupling_shape(&self) -> Option<(usize, usize, usize, NetSpec)> {
        let (dim, parity, per, net) = match *self {
            LayerSpec::AffineCoupling { dim, parity, net } => (dim, parity, coupling::AFFINE_PARAMS, net),
            LayerSpec::MixtureCdfCoupling { dim, parity, components, logit_output, net } => (dim, parity, coupling::mixture_params(components, logit_output), net),
            LayerSpec::RqSplineCoupling { dim, parity, bins, net, .. } => (dim, parity, coupling::spline_params(bins), net),
            _ => return None,
        };
        let (cond, trans) = split(dim, parity);
        Some((cond.len(), trans.len(), per, net))
    }

    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        if let Some((a, m, per, net)) = self.coupling_shape() {
            return net.shapes(a, m * per);
        }
        match *self {
            LayerSpec::ActNorm { dim } | LayerSpec::ShiftScale { dim } => vec![[1, dim], [1, dim]],
            LayerSpec::InvertibleLinear { dim, .. } => vec![[dim, dim], [dim, dim], [1, dim]],
            _ => vec![],
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("{}: {m}", self.name())));
        if self.in_dim() == 0 {
            return bad("dimension must be positive".into());
        }
        match self {
            LayerSpec::Slice { latent_dim, data_dim } if latent_dim > data_dim => bad(format!("latent dim {latent_dim} exceeds data dim {data_dim}")),
            LayerSpec::MixtureCdfCoupling { components: 0, .. } => bad("needs at least one component".into()),
            LayerSpec::RqSplineCoupling { bins, bound, .. } if *bins < 2 || *bound <= 0.0 => bad("needs at least two bins and a positive bound".into()),
            LayerSpec::InvertibleLinear { dim, perm, sign } if !perm.is_empty() => {
                let mut seen = vec![false; *dim];
                let ok = perm.len() == *dim && sign.len() == *dim && perm.iter().all(|&p| p < *dim && !std::mem::replace(&mut seen[p], true)) && sign.iter().all(|s| s.abs() == 1.0);
                if ok {
                    Ok(())
                } else {
                    bad("perm must be a permutation and sign entries +-1".into())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn is_coupling(&self) -> bool {
        self.coupling_shape().is_some()
    }

    /// Fresh parameters. Couplings start at their transformer's zero point
    /// (identity for affine and spline); invertible-linear layers with no
    /// permutation yet get a random orthogonal matrix.
    pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Tensor<T>> {
        if let Some((a, m, per, net)) = self.coupling_shape() {
            let bias = match *self {
                LayerSpec::MixtureCdfCoupling { components, logit_output, .. } => coupling::mixture_bias(components, logit_output, m),
                _ => vec![0.0; m * per],
            };
            return net.init(a, &bias, rng);
        }
        match self {
            LayerSpec::ActNorm { dim } => vec![Tensor::zeros(1, *dim), Tensor::zeros(1, *dim)],
            LayerSpec::ShiftScale { dim } => vec![Tensor::zeros(1, *dim), Tensor::ones(1, *dim)],
            LayerSpec::InvertibleLinear { dim, perm, sign } => {
                let d = *dim;
                if !perm.is_empty() {
                    return vec![Tensor::zeros(d, d), Tensor::zeros(d, d), Tensor::zeros(1, d)];
                }
                let a: Tensor<f64> = Tensor::from_fn(d, d, |_, _| StandardNormal.sample(&mut *rng));
                let (q, _) = linalg::qr(&a);
                let (p, sg, params) = linear_factors(&q);
                *perm = p;
                *sign = sg;
                params
            }
            _ => vec![],
        }
    }
}

/// A layer and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayer<T: Scalar> {
    pub spec: LayerSpec,
    pub params: Vec<Tensor<T>>,
}

fn rows_logdet<'g, T: Scalar>(total: Var<'g, T>, rows: usize) -> Var<'g, T> {
    total.sum().broadcast_to(rows, 1)
}

fn reassemble<'g, T: Scalar>(cond: &Range<usize>, kept: Var<'g, T>, moved: Var<'g, T>) -> Var<'g, T> {
    if cond.is_empty() {
        moved
    } else if cond.start == 0 {
        Var::concat_cols(&[kept, moved])
    } else {
        Var::concat_cols(&[moved, kept])
    }
}

/// `(perm, sign, [L, U, log|diag U|])` with `A = P^T L U`.
pub(crate) fn linear_factors<T: Scalar>(a: &Tensor<f64>) -> (Vec<usize>, Vec<f64>, Vec<Tensor<T>>) {
    let d = a.rows();
    let (l, u, p) = linalg::Lu::new(a).factors();
    let sign = (0..d).map(|i| u[(i, i)].signum()).collect();
    let lower = Tensor::from_fn(d, d, |i, j| if i > j { T::lit(l[(i, j)]) } else { T::zero() });
    let upper = Tensor::from_fn(d, d, |i, j| if j > i { T::lit(u[(i, j)]) } else { T::zero() });
    let log_s = Tensor::from_fn(1, d, |_, j| T::lit(u[(j, j)].abs().ln()));
    (p, sign, vec![lower, upper, log_s])
}

fn linear_weight<'g, T: Scalar>(p: &[Var<'g, T>], perm: &[usize], sign: &[f64]) -> Var<'g, T> {
    let g = p[0].graph();
    let d = perm.len();
    let strict_lower = g.constant(Tensor::from_fn(d, d, |i, j| if i > j { T::one() } else { T::zero() }));
    let strict_upper = g.constant(Tensor::from_fn(d, d, |i, j| if j > i { T::one() } else { T::zero() }));
    let eye = g.constant(Tensor::eye(d));
    let signs = g.constant(Tensor::from_fn(1, d, |_, j| T::lit(sign[j])));
    let diag = (p[2].exp() * signs).broadcast_to(d, d) * eye;
    let l = p[0] * strict_lower + eye;
    let u = p[1] * strict_upper + diag;
    let pt = g.constant(Tensor::from_fn(d, d, |i, j| if perm[j] == i { T::one() } else { T::zero() }));
    pt.matmul(l).matmul(u)
}

impl<T: Scalar> FlowLayer<T> {
    /// Records `x = f(z)` and `log|det df/dz|` per row (`B x 1`).
    pub(crate) fn record_forward<'g>(&self, p: &[Var<'g, T>], z: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let g = z.graph();
        let rows = z.rows();
        match &self.spec {
            LayerSpec::ActNorm { .. } => Ok((z * p[1].exp() + p[0], rows_logdet(p[1], rows))),
            LayerSpec::ShiftScale { .. } => Ok((z * p[1] + p[0], rows_logdet(p[1].abs().ln(), rows))),
            LayerSpec::InvertibleLinear { perm, sign, .. } => {
                let w = linear_weight(p, perm, sign);
                Ok((z.matmul(w.t()), rows_logdet(p[2], rows)))
            }
            LayerSpec::Logit { .. } => {
                if z.value().data().iter().any(|v| !(*v > T::zero() && *v < T::one())) {
                    return Err(Error::invalid("logit input outside (0, 1)"));
                }
                let (a, b) = (z.ln(), z.rsub(T::one()).ln());
                Ok((a - b, (-(a + b)).sum_cols()))
            }
            LayerSpec::Slice { latent_dim, data_dim } => {
                let x = if data_dim > latent_dim { Var::concat_cols(&[z, g.zeros(rows, data_dim - latent_dim)]) } else { z };
                Ok((x, g.zeros(rows, 1)))
            }
            spec => self.record_coupling(spec, p, z, true),
        }
    }

    /// Records `z = f^{-1}(x)` (for the slice layer, its left inverse) and
    /// `log|det df^{-1}/dx|` per row.
    pub(crate) fn record_inverse<'g>(&self, p: &[Var<'g, T>], x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let g = x.graph();
        let rows = x.rows();
        match &self.spec {
            LayerSpec::ActNorm { .. } => Ok(((x - p[0]) * (-p[1]).exp(), rows_logdet(-p[1], rows))),
            LayerSpec::ShiftScale { .. } => Ok(((x - p[0]) / p[1], rows_logdet(-p[1].abs().ln(), rows))),
            LayerSpec::InvertibleLinear { perm, sign, .. } => {
                let w = linear_weight(p, perm, sign);
                // two Newton-Schulz steps from the numeric inverse
                let x0 = g.constant(linalg::inverse(&w.value()));
                let x1 = x0.scale(T::lit(2.0)) - x0.matmul(w).matmul(x0);
                let x2 = x1.scale(T::lit(2.0)) - x1.matmul(w).matmul(x1);
                Ok((x.matmul(x2.t()), rows_logdet(-p[2], rows)))
            }
            LayerSpec::Logit { .. } => {
                let z = x.sigmoid();
                let ld = -(x.softplus() + (-x).softplus());
                Ok((z, ld.sum_cols()))
            }
            LayerSpec::Slice { latent_dim, .. } => Ok((x.slice_cols(0, *latent_dim), g.zeros(rows, 1))),
            spec => self.record_coupling(spec, p, x, false),
        }
    }

    fn record_coupling<'g>(&self, spec: &LayerSpec, p: &[Var<'g, T>], v: Var<'g, T>, forward: bool) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (dim, parity, net) = match *spec {
            LayerSpec::AffineCoupling { dim, parity, net } | LayerSpec::MixtureCdfCoupling { dim, parity, net, .. } | LayerSpec::RqSplineCoupling { dim, parity, net, .. } => (dim, parity, net),
            _ => unreachable!("not a coupling layer"),
        };
        let (cond, trans) = split(dim, parity);
        let rows = v.rows();
        let kept = if cond.is_empty() { v } else { v.slice_cols(cond.start, cond.end) };
        let moved = v.slice_cols(trans.start, trans.end);
        let theta = net.record(p, kept, rows);
        let (out, logdet) = match *spec {
            LayerSpec::AffineCoupling { .. } if forward => coupling::affine_forward(theta, moved),
            LayerSpec::AffineCoupling { .. } => coupling::affine_inverse(theta, moved),
            LayerSpec::MixtureCdfCoupling { components, logit_output, .. } if forward => coupling::mixture_forward(theta, moved, components, logit_output)?,
            LayerSpec::MixtureCdfCoupling { components, logit_output, .. } => coupling::mixture_inverse(theta, moved, components, logit_output)?,
            LayerSpec::RqSplineCoupling { bins, bound, .. } if forward => coupling::spline_forward(theta, moved, bins, T::lit(bound)),
            LayerSpec::RqSplineCoupling { bins, bound, .. } => coupling::spline_inverse(theta, moved, bins, T::lit(bound)),
            _ => unreachable!(),
        };
        Ok((reassemble(&cond, kept, out), logdet))
    }
}
