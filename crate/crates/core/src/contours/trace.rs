use serde::{Deserialize, Serialize};

use super::point::{evaluate_data, principal_frame_of};
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Eigenvalue gap below which the tracked component is considered ambiguous.
pub const TRACE_GAP: f64 = 1e-6;

/// One recorded step of a traced principal manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// `|cos|` between `J_k` and the tracked principal component.
    pub cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePath {
    pub block: usize,
    pub points: Vec<TracePoint>,
    /// Why tracing stopped before `t_max`, if it did.
    pub truncated: Option<String>,
}

impl TracePath {
    /// Largest deviation over the path of latent coordinate `i` from its
    /// starting value.
    pub fn drift(&self, i: usize) -> f64 {
        let z0 = self.points[0].z[i];
        self.points.iter().map(|p| (p.z[i] - z0).abs()).fold(0.0, f64::max)
    }

    /// Largest drift over every latent coordinate except the traced one.
    pub fn off_block_drift(&self) -> f64 {
        (0..self.points[0].z.len()).filter(|&i| i != self.block).map(|i| self.drift(i)).fold(0.0, f64::max)
    }

    pub fn end(&self) -> &TracePoint {
        self.points.last().expect("a path has its starting point")
    }
}

struct Field<T> {
    v: Vec<T>,
    z: Vec<T>,
    cos: T,
    gap: T,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn axpy<T: Scalar>(x: &[T], h: T, v: &[T]) -> Vec<T> {
    x.iter().zip(v).map(|(&a, &b)| a + h * b).collect()
}

/// `sqrt(Lambda_i) w_i` at `x` for the component closest to `prev`, signed to
/// agree with it.
fn field<T: Scalar>(stack: &FlowStack<T>, x: &[T], block: usize, prev: Option<&[T]>) -> Result<Field<T>> {
    let pt = evaluate_data(stack, &Tensor::row_vector(x))?.remove(0);
    let frame = principal_frame_of(&pt.j)?;
    let jk = pt.j.col(block);
    let jn = norm(&jk);
    if !(jn > T::zero()) {
        return Err(Error::Degenerate("J_k vanishes at the trace point".into()));
    }
    let reference = prev.map(<[T]>::to_vec).unwrap_or_else(|| jk.clone());
    let n = frame.values.len();
    let (i, _) = (0..n).map(|i| (i, dot(&frame.vector(i), &reference).abs())).fold((0, T::neg_infinity()), |a, b| if b.1 > a.1 { b } else { a });
    let mut w = frame.vector(i);
    if dot(&w, &reference) < T::zero() {
        w.iter_mut().for_each(|v| *v = -*v);
    }
    let gap = (0..n).filter(|&j| j != i).map(|j| (frame.values[i] - frame.values[j]).abs()).fold(T::infinity(), T::min);
    let speed = frame.values[i].sqrt();
    Ok(Field { cos: dot(&w, &jk).abs() / jn, v: w.iter().map(|&c| c * speed).collect(), z: pt.z, gap })
}

/// Integrates `dx/dt = sqrt(Lambda) w` from `x0` with RK4, following the
/// principal component that best matches the contour tangent `J_k` at the
/// start. The component is re-identified at every stage as the one closest
/// to the previous tangent, and its sign is kept continuous. Stops early with
/// a truncation note when the tracked eigenvalue comes within [`TRACE_GAP`]
/// of another.
pub fn trace_principal_manifold<T: Scalar>(stack: &FlowStack<T>, x0: &[T], block: &[usize], t_max: f64, step: f64) -> Result<TracePath> {
    let [k] = block else {
        return Err(Error::Unsupported(format!("tracing needs a 1D block, got {} indices", block.len())));
    };
    let k = *k;
    if k >= stack.latent_dim() {
        return Err(Error::Partition(format!("index {k} outside latent dim {}", stack.latent_dim())));
    }
    if !(step > 0.0) || !(t_max >= 0.0) || !step.is_finite() || !t_max.is_finite() {
        return Err(Error::invalid("trace needs step > 0 and t_max >= 0"));
    }
    let gap_tol = T::lit(TRACE_GAP);
    let record = |t: f64, x: &[T], f: &Field<T>| TracePoint { t, x: x.iter().map(|v| v.as_f64()).collect(), z: f.z.iter().map(|v| v.as_f64()).collect(), cos: f.cos.as_f64() };
    let mut x = x0.to_vec();
    let mut f1 = field(stack, &x, k, None)?;
    let mut points = vec![record(0.0, &x, &f1)];
    let mut truncated = None;
    let n = (t_max / step - 1e-9).ceil().max(0.0) as usize;
    let mut t = 0.0;
    for _ in 0..n {
        let h = step.min(t_max - t);
        let hh = T::lit(h);
        let half = T::lit(0.5 * h);
        let stages = (|| -> Result<Option<Vec<T>>> {
            if f1.gap < gap_tol {
                return Ok(None);
            }
            let f2 = field(stack, &axpy(&x, half, &f1.v), k, Some(&f1.v))?;
            let f3 = field(stack, &axpy(&x, half, &f2.v), k, Some(&f2.v))?;
            let f4 = field(stack, &axpy(&x, hh, &f3.v), k, Some(&f3.v))?;
            if f2.gap < gap_tol || f3.gap < gap_tol || f4.gap < gap_tol {
                return Ok(None);
            }
            let sixth = hh / T::lit(6.0);
            Ok(Some((0..x.len()).map(|i| x[i] + sixth * (f1.v[i] + T::lit(2.0) * (f2.v[i] + f3.v[i]) + f4.v[i])).collect()))
        })()?;
        let Some(next) = stages else {
            truncated = Some(format!("eigenvalue gap below {TRACE_GAP} near t = {t}"));
            break;
        };
        let prev = f1.v.clone();
        x = next;
        t += h;
        f1 = field(stack, &x, k, Some(&prev))?;
        points.push(record(t, &x, &f1));
    }
    Ok(TracePath { block: k, points, truncated })
}
