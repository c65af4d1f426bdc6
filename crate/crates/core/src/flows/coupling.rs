//! Elementwise transformers used inside coupling layers. Each operates on a
//! `B x m` block of coordinates with its parameters laid out as consecutive
//! `B x m` column groups of the conditioner output.

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn group<'g, T: Scalar>(params: Var<'g, T>, m: usize, i: usize) -> Var<'g, T> {
    params.slice_cols(i * m, (i + 1) * m)
}

fn sum_all<'g, T: Scalar>(parts: impl IntoIterator<Item = Var<'g, T>>) -> Var<'g, T> {
    parts.into_iter().reduce(|a, b| a + b).expect("at least one term")
}

/// Softmax over a list of equally shaped groups, shifted by a constant max.
fn softmax<'g, T: Scalar>(g: &'g Graph<T>, raw: &[Var<'g, T>]) -> Vec<Var<'g, T>> {
    let [r, c] = raw[0].shape();
    let shift = Tensor::from_fn(r, c, |i, j| raw.iter().map(|v| v.value()[(i, j)]).fold(T::neg_infinity(), T::max));
    let shift = g.constant(shift);
    let e: Vec<_> = raw.iter().map(|v| (*v - shift).exp()).collect();
    let total = sum_all(e.iter().copied());
    e.into_iter().map(|v| v / total).collect()
}

// ---------------------------------------------------------------- affine

pub(crate) const AFFINE_PARAMS: usize = 2;

/// `x = z * exp(tanh(s)) + t`.
pub(crate) fn affine_forward<'g, T: Scalar>(p: Var<'g, T>, z: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
    let m = z.cols();
    let s = group(p, m, 0).tanh();
    let t = group(p, m, 1);
    (z * s.exp() + t, s.sum_cols())
}

pub(crate) fn affine_inverse<'g, T: Scalar>(p: Var<'g, T>, x: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
    let m = x.cols();
    let s = group(p, m, 0).tanh();
    let t = group(p, m, 1);
    ((x - t) * (-s).exp(), -s.sum_cols())
}

// ---------------------------------------------------------------- mixture CDF

pub(crate) fn mixture_params(k: usize, logit_output: bool) -> usize {
    3 * k + if logit_output { 2 } else { 0 }
}

/// Read-out bias that spreads the component locations so they do not start
/// (and, by symmetry, stay) identical.
pub(crate) fn mixture_bias(k: usize, logit_output: bool, m: usize) -> Vec<f64> {
    let mut b = vec![0.0; mixture_params(k, logit_output) * m];
    for i in 0..k {
        let loc = if k == 1 { 0.0 } else { -1.5 + 3.0 * i as f64 / (k - 1) as f64 };
        for j in 0..m {
            b[(k + i) * m + j] = loc;
        }
    }
    b
}

struct Mixture<'g, T: Scalar> {
    w: Vec<Var<'g, T>>,
    loc: Vec<Var<'g, T>>,
    log_s: Vec<Var<'g, T>>,
}

struct MixtureEval<'g, T: Scalar> {
    cdf: Var<'g, T>,
    ccdf: Var<'g, T>,
    log_pdf: Var<'g, T>,
}

impl<'g, T: Scalar> Mixture<'g, T> {
    fn new(p: Var<'g, T>, k: usize, m: usize) -> Self {
        let g = p.graph();
        let raw: Vec<_> = (0..k).map(|i| group(p, m, i)).collect();
        Self { w: softmax(g, &raw), loc: (0..k).map(|i| group(p, m, k + i)).collect(), log_s: (0..k).map(|i| group(p, m, 2 * k + i)).collect() }
    }

    fn eval(&self, z: Var<'g, T>) -> MixtureEval<'g, T> {
        let mut cdf = Vec::new();
        let mut ccdf = Vec::new();
        let mut pdf = Vec::new();
        for i in 0..self.w.len() {
            let inv_s = (-self.log_s[i]).exp();
            let u = (z - self.loc[i]) * inv_s;
            let a = u.sigmoid();
            let b = (-u).sigmoid();
            cdf.push(self.w[i] * a);
            ccdf.push(self.w[i] * b);
            pdf.push(self.w[i] * a * b * inv_s);
        }
        MixtureEval { cdf: sum_all(cdf), ccdf: sum_all(ccdf), log_pdf: sum_all(pdf).ln() }
    }

    /// Numeric `logit F(z)` and its derivative at one entry.
    fn scalar_logit(&self, vals: &MixtureValues<T>, r: usize, c: usize, z: T) -> (T, T) {
        let mut f = T::zero();
        let mut fc = T::zero();
        let mut pdf = T::zero();
        for i in 0..self.w.len() {
            let inv_s = (-vals.log_s[i][(r, c)]).exp();
            let u = (z - vals.loc[i][(r, c)]) * inv_s;
            let a = crate::diff::sigmoid_value(u);
            let b = crate::diff::sigmoid_value(-u);
            let w = vals.w[i][(r, c)];
            f = f + w * a;
            fc = fc + w * b;
            pdf = pdf + w * a * b * inv_s;
        }
        (f.ln() - fc.ln(), pdf / (f * fc))
    }
}

struct MixtureValues<T> {
    w: Vec<Tensor<T>>,
    loc: Vec<Tensor<T>>,
    log_s: Vec<Tensor<T>>,
}

impl<'g, T: Scalar> Mixture<'g, T> {
    fn values(&self) -> MixtureValues<T> {
        MixtureValues {
            w: self.w.iter().map(|v| v.tensor()).collect(),
            loc: self.loc.iter().map(|v| v.tensor()).collect(),
            log_s: self.log_s.iter().map(|v| v.tensor()).collect(),
        }
    }

    /// Solves `logit F(z) = y` entrywise: bracket by doubling, bisect, then
    /// polish with Newton.
    fn solve(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        const MAX_BISECT: usize = 200;
        const MAX_EXPAND: usize = 64;
        let vals = self.values();
        let tol = T::lit(1e-10);
        let mut z = Tensor::zeros(y.rows(), y.cols());
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let target = y[(r, c)];
                let h = |z: T| self.scalar_logit(&vals, r, c, z).0 - target;
                let centre = vals.loc.iter().map(|l| l[(r, c)]).sum::<T>() / T::from_usize_lossy(vals.loc.len());
                let mut lo = centre - T::one();
                let mut hi = centre + T::one();
                let mut step = T::one();
                let mut n = 0;
                while !(h(lo) < T::zero()) {
                    step = step * T::lit(2.0);
                    lo = centre - step;
                    n += 1;
                    if n > MAX_EXPAND {
                        return Err(Error::invalid(format!("mixture CDF inverse could not bracket target {target}")));
                    }
                }
                step = T::one();
                n = 0;
                while !(h(hi) > T::zero()) {
                    step = step * T::lit(2.0);
                    hi = centre + step;
                    n += 1;
                    if n > MAX_EXPAND {
                        return Err(Error::invalid(format!("mixture CDF inverse could not bracket target {target}")));
                    }
                }
                for _ in 0..MAX_BISECT {
                    let mid = (lo + hi) * T::lit(0.5);
                    if hi - lo <= tol || mid <= lo || mid >= hi {
                        break;
                    }
                    if h(mid) < T::zero() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let mut x = (lo + hi) * T::lit(0.5);
                for _ in 0..3 {
                    let (v, d) = self.scalar_logit(&vals, r, c, x);
                    let next = x - (v - target) / d;
                    if !next.is_finite() || next < lo - tol || next > hi + tol {
                        break;
                    }
                    x = next;
                }
                z[(r, c)] = x;
            }
        }
        Ok(z)
    }

    /// One Newton step on `logit F(z) = y`, recorded.
    fn newton(&self, z: Var<'g, T>, y: Var<'g, T>) -> Var<'g, T> {
        let e = self.eval(z);
        let logit = e.cdf.ln() - e.ccdf.ln();
        z - (logit - y) * e.cdf * e.ccdf / e.log_pdf.exp()
    }
}

/// Forward mixture-CDF transform. With `logit_output` the CDF is followed by
/// a logit and a learned affine map, otherwise the output lies in `(0, 1)`.
pub(crate) fn mixture_forward<'g, T: Scalar>(p: Var<'g, T>, z: Var<'g, T>, k: usize, logit_output: bool) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let m = z.cols();
    let mix = Mixture::new(p, k, m);
    let e = mix.eval(z);
    let (f, fc) = (e.cdf.value(), e.ccdf.value());
    // with a logit read-out the complement is carried separately, so only
    // underflow of either tail is fatal
    let outside = f.data().iter().zip(fc.data()).any(|(&a, &b)| !(a > T::zero() && b > T::zero()) || (!logit_output && a >= T::one()));
    if outside {
        return Err(Error::invalid("mixture CDF output outside (0, 1)"));
    }
    if logit_output {
        let a = group(p, m, 3 * k);
        let b = group(p, m, 3 * k + 1);
        let (lf, lfc) = (e.cdf.ln(), e.ccdf.ln());
        let x = (lf - lfc) * a.exp() + b;
        Ok((x, (e.log_pdf - lf - lfc + a).sum_cols()))
    } else {
        Ok((e.cdf, e.log_pdf.sum_cols()))
    }
}

/// Inverse mixture-CDF transform: numeric root, then two recorded Newton
/// steps from that (constant) root so first and second derivatives with
/// respect to the input and parameters are those of the exact inverse.
pub(crate) fn mixture_inverse<'g, T: Scalar>(p: Var<'g, T>, x: Var<'g, T>, k: usize, logit_output: bool) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let m = x.cols();
    let g = p.graph();
    let mix = Mixture::new(p, k, m);
    let y = if logit_output {
        let a = group(p, m, 3 * k);
        let b = group(p, m, 3 * k + 1);
        (x - b) * (-a).exp()
    } else {
        if x.value().data().iter().any(|v| !(*v > T::zero() && *v < T::one())) {
            return Err(Error::invalid("mixture CDF inverse input outside (0, 1)"));
        }
        x.ln() - x.rsub(T::one()).ln()
    };
    let z0 = g.constant(mix.solve(&y.value())?);
    let z = mix.newton(mix.newton(z0, y), y);
    let e = mix.eval(z);
    let logdet = if logit_output {
        let a = group(p, m, 3 * k);
        -(e.log_pdf - e.cdf.ln() - e.ccdf.ln() + a).sum_cols()
    } else {
        -e.log_pdf.sum_cols()
    };
    Ok((z, logdet))
}

// ---------------------------------------------------------------- RQ spline

pub(crate) fn spline_params(bins: usize) -> usize {
    3 * bins - 1
}

const MIN_BIN: f64 = 1e-3;
const MIN_DERIV: f64 = 1e-3;

struct Spline<'g, T: Scalar> {
    /// `bins + 1` knot positions in input and output space, and derivatives.
    xs: Vec<Var<'g, T>>,
    ys: Vec<Var<'g, T>>,
    ds: Vec<Var<'g, T>>,
    bound: T,
}

fn knots<'g, T: Scalar>(g: &'g Graph<T>, raw: &[Var<'g, T>], bound: T) -> Vec<Var<'g, T>> {
    let k = raw.len();
    let [r, c] = raw[0].shape();
    let w = softmax(g, raw);
    let span = bound * T::lit(2.0);
    let scale = span * (T::one() - T::lit(MIN_BIN) * T::from_usize_lossy(k));
    let mut out = vec![g.constant(Tensor::full(r, c, -bound))];
    for (i, wi) in w.iter().enumerate() {
        if i + 1 == k {
            out.push(g.constant(Tensor::full(r, c, bound)));
        } else {
            let next = out[i] + (*wi * scale).offset(span * T::lit(MIN_BIN));
            out.push(next);
        }
    }
    out
}

/// Entrywise bin index: the last knot at or below `v`, clamped to a bin.
fn bin_masks<'g, T: Scalar>(g: &'g Graph<T>, knots: &[Var<'g, T>], v: &Tensor<T>) -> Vec<Option<Var<'g, T>>> {
    let bins = knots.len() - 1;
    let kv: Vec<_> = knots.iter().map(|k| k.value()).collect();
    let mut idx = vec![0usize; v.len()];
    for (e, slot) in idx.iter_mut().enumerate() {
        let (r, c) = (e / v.cols(), e % v.cols());
        let mut b = 0;
        while b + 1 < bins && kv[b + 1][(r, c)] <= v[(r, c)] {
            b += 1;
        }
        *slot = b;
    }
    (0..bins)
        .map(|b| {
            if idx.iter().all(|&i| i != b) {
                return None;
            }
            Some(g.constant(Tensor::from_fn(v.rows(), v.cols(), |r, c| if idx[r * v.cols() + c] == b { T::one() } else { T::zero() })))
        })
        .collect()
}

fn gather<'g, T: Scalar>(masks: &[Option<Var<'g, T>>], vals: &[Var<'g, T>], offset: usize) -> Var<'g, T> {
    sum_all(masks.iter().enumerate().filter_map(|(b, m)| m.map(|m| m * vals[b + offset])))
}

struct BinVals<'g, T: Scalar> {
    xk: Var<'g, T>,
    wk: Var<'g, T>,
    yk: Var<'g, T>,
    hk: Var<'g, T>,
    dk: Var<'g, T>,
    dk1: Var<'g, T>,
}

impl<'g, T: Scalar> Spline<'g, T> {
    fn new(p: Var<'g, T>, bins: usize, m: usize, bound: T) -> Self {
        let g = p.graph();
        let rows = p.rows();
        let wraw: Vec<_> = (0..bins).map(|i| group(p, m, i)).collect();
        let hraw: Vec<_> = (0..bins).map(|i| group(p, m, bins + i)).collect();
        // softplus(c) = 1 - MIN_DERIV, so a zero parameter gives slope one
        let c = T::lit((1.0 - MIN_DERIV).exp_m1().ln());
        let one = g.constant(Tensor::ones(rows, m));
        let mut ds = vec![one];
        for i in 0..bins - 1 {
            ds.push(group(p, m, 2 * bins + i).offset(c).softplus().offset(T::lit(MIN_DERIV)));
        }
        ds.push(one);
        Self { xs: knots(g, &wraw, bound), ys: knots(g, &hraw, bound), ds, bound }
    }

    fn bin(&self, masks: &[Option<Var<'g, T>>]) -> BinVals<'g, T> {
        let xk = gather(masks, &self.xs, 0);
        let yk = gather(masks, &self.ys, 0);
        BinVals { xk, wk: gather(masks, &self.xs, 1) - xk, yk, hk: gather(masks, &self.ys, 1) - yk, dk: gather(masks, &self.ds, 0), dk1: gather(masks, &self.ds, 1) }
    }

    fn inside(&self, v: &Tensor<T>) -> Tensor<T> {
        v.map(|x| if x >= -self.bound && x <= self.bound { T::one() } else { T::zero() })
    }

    fn log_slope(b: &BinVals<'g, T>, xi: Var<'g, T>) -> Var<'g, T> {
        let s = b.hk / b.wk;
        let one_m = xi.rsub(T::one());
        let xi1 = xi * one_m;
        let den = s + (b.dk1 + b.dk - s.scale(T::lit(2.0))) * xi1;
        let num = s.square() * (b.dk1 * xi.square() + s.scale(T::lit(2.0)) * xi1 + b.dk * one_m.square());
        num.ln() - den.square().ln()
    }
}

/// Rational-quadratic spline on `[-bound, bound]`, identity outside.
pub(crate) fn spline_forward<'g, T: Scalar>(p: Var<'g, T>, z: Var<'g, T>, bins: usize, bound: T) -> (Var<'g, T>, Var<'g, T>) {
    let g = p.graph();
    let sp = Spline::new(p, bins, z.cols(), bound);
    let inside = sp.inside(&z.value());
    let outside = g.constant(inside.map(|v| T::one() - v));
    let inside = g.constant(inside);
    let zin = z * inside;
    let b = sp.bin(&bin_masks(g, &sp.xs, &zin.value()));
    let xi = (zin - b.xk) / b.wk;
    let s = b.hk / b.wk;
    let xi1 = xi * xi.rsub(T::one());
    let den = s + (b.dk1 + b.dk - s.scale(T::lit(2.0))) * xi1;
    let y = b.yk + b.hk * (s * xi.square() + b.dk * xi1) / den;
    let out = y * inside + z * outside;
    (out, (Spline::log_slope(&b, xi) * inside).sum_cols())
}

pub(crate) fn spline_inverse<'g, T: Scalar>(p: Var<'g, T>, x: Var<'g, T>, bins: usize, bound: T) -> (Var<'g, T>, Var<'g, T>) {
    let g = p.graph();
    let sp = Spline::new(p, bins, x.cols(), bound);
    let inside = sp.inside(&x.value());
    let outside = g.constant(inside.map(|v| T::one() - v));
    let inside = g.constant(inside);
    let xin = x * inside;
    let b = sp.bin(&bin_masks(g, &sp.ys, &xin.value()));
    let s = b.hk / b.wk;
    let dy = xin - b.yk;
    let slope_sum = b.dk1 + b.dk - s.scale(T::lit(2.0));
    let qa = b.hk * (s - b.dk) + dy * slope_sum;
    let qb = b.hk * b.dk - dy * slope_sum;
    let qc = -(s * dy);
    let disc = (qb.square() - qa * qc.scale(T::lit(4.0))).relu();
    let xi = qc.scale(T::lit(2.0)) / (-qb - disc.sqrt());
    let z = b.xk + xi * b.wk;
    let out = z * inside + x * outside;
    (out, -(Spline::log_slope(&b, xi) * inside).sum_cols())
}
