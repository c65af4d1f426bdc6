use serde::{Deserialize, Serialize};

use super::gram;
use super::partition::Partition;
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything the contour quantities need at one point: the latent and data
/// coordinates, `J` at `z`, `G` at `x` (square stacks only), the model log
/// density and the per-coordinate prior log densities.
#[derive(Debug, Clone)]
pub struct ContourPoint<T: Scalar> {
    pub z: Vec<T>,
    pub x: Vec<T>,
    /// `D x d`.
    pub j: Tensor<T>,
    /// `d x D`; absent for injective stacks, where `g` is only a left inverse.
    pub g: Option<Tensor<T>>,
    /// Flow log density: change of variables for square stacks, the Gram
    /// form for injective ones.
    pub logpx: T,
    prior_dims: Vec<T>,
}

fn unit(rows: usize, cols: usize, k: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, j| if j == k { 1.0 } else { 0.0 })
}

fn cols_to_matrices<T: Scalar>(cols: &[Tensor<T>], transpose: bool) -> Vec<Tensor<T>> {
    let (rows, d) = (cols[0].rows(), cols[0].cols());
    (0..rows)
        .map(|r| {
            if transpose {
                Tensor::from_fn(cols.len(), d, |i, c| cols[i][(r, c)])
            } else {
                Tensor::from_fn(d, cols.len(), |i, c| cols[c][(r, i)])
            }
        })
        .collect()
}

/// Evaluates every row of `z` (latent points). `G` is computed with vjps at
/// `x = f(z)` when the stack is square.
pub fn evaluate_latent<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>) -> Result<Vec<ContourPoint<T>>> {
    let d = stack.latent_dim();
    if z.cols() != d {
        return Err(Error::shape(format!("latent points have {} columns, stack expects {d}", z.cols())));
    }
    in_chunks(z, |c, offset| latent_chunk(stack, c, offset))
}

/// Rows per graph; keeps memory flat on large evaluation sets.
const CHUNK: usize = 2048;

fn in_chunks<T: Scalar>(x: &Tensor<T>, mut f: impl FnMut(&Tensor<T>, usize) -> Result<Vec<ContourPoint<T>>>) -> Result<Vec<ContourPoint<T>>> {
    if x.rows() <= CHUNK {
        return f(x, 0);
    }
    let mut out = Vec::with_capacity(x.rows());
    for start in (0..x.rows()).step_by(CHUNK) {
        out.extend(f(&x.slice_rows(start, (start + CHUNK).min(x.rows())), start)?);
    }
    Ok(out)
}

fn latent_chunk<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>, offset: usize) -> Result<Vec<ContourPoint<T>>> {
    let d = stack.latent_dim();
    let g = Graph::new();
    let b = stack.bind(&g)?;
    let zv = g.leaf(z.clone());
    let (xv, _) = b.forward(zv)?;
    let n = z.rows();
    let jcols: Vec<Tensor<T>> = (0..d).map(|k| Ok(g.jvp(&[xv], &[zv], &[g.constant(unit(n, d, k).cast())])?[0].tensor())).collect::<Result<_>>()?;
    let prior = b.prior_logp(zv).tensor();
    let dims = stack.prior().record_dims(zv).tensor();
    let x = xv.tensor();
    let js = cols_to_matrices(&jcols, false);
    let gs = if stack.is_injective() {
        None
    } else {
        let xl = g.leaf(x.clone());
        let (zz, _) = b.inverse(xl)?;
        let rows: Vec<Tensor<T>> = (0..d).map(|k| Ok(g.vjp(zz, g.constant(unit(n, d, k).cast()), &[xl])?[0].tensor())).collect::<Result<_>>()?;
        Some(cols_to_matrices(&rows, true))
    };
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let j = js[r].clone();
        let logpx = if stack.is_injective() {
            let ld = linalg::gram_logdet(&j);
            if !ld.is_finite() {
                return Err(Error::Degenerate(format!("J^T J is singular at sample {}", offset + r)));
            }
            prior[(r, 0)] - T::lit(0.5) * ld
        } else {
            let (sign, ld) = linalg::slogdet(&j);
            if sign == T::zero() {
                return Err(Error::Degenerate(format!("J is singular at sample {}", offset + r)));
            }
            prior[(r, 0)] - ld
        };
        out.push(ContourPoint { z: z.row(r).to_vec(), x: x.row(r).to_vec(), j, g: gs.as_ref().map(|v| v[r].clone()), logpx, prior_dims: dims.row(r).to_vec() });
    }
    Ok(out)
}

/// Evaluates every row of `x` (data points) at `z = g(x)`. For square stacks
/// `G` comes from vjps of `g` at `x` and `log p(x)` from the layer
/// log-determinants; for injective stacks `g` is the left inverse.
pub fn evaluate_data<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>) -> Result<Vec<ContourPoint<T>>> {
    if stack.is_injective() {
        let (z, _) = stack.inverse(x)?;
        return evaluate_latent(stack, &z);
    }
    if x.cols() != stack.data_dim() {
        return Err(Error::shape(format!("data points have {} columns, stack expects {}", x.cols(), stack.data_dim())));
    }
    in_chunks(x, |c, _| data_chunk(stack, c))
}

fn data_chunk<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>) -> Result<Vec<ContourPoint<T>>> {
    let d = stack.latent_dim();
    let g = Graph::new();
    let b = stack.bind(&g)?;
    let n = x.rows();
    let xl = g.leaf(x.clone());
    let (zv, ld_g) = b.inverse(xl)?;
    let rows: Vec<Tensor<T>> = (0..d).map(|k| Ok(g.vjp(zv, g.constant(unit(n, d, k).cast()), &[xl])?[0].tensor())).collect::<Result<_>>()?;
    let z = zv.tensor();
    let zl = g.leaf(z.clone());
    let (xf, _) = b.forward(zl)?;
    let jcols: Vec<Tensor<T>> = (0..d).map(|k| Ok(g.jvp(&[xf], &[zl], &[g.constant(unit(n, d, k).cast())])?[0].tensor())).collect::<Result<_>>()?;
    let logpx = (b.prior_logp(zv) + ld_g).tensor();
    let dims = stack.prior().record_dims(zl).tensor();
    let js = cols_to_matrices(&jcols, false);
    let gs = cols_to_matrices(&rows, true);
    Ok((0..n)
        .map(|r| ContourPoint { z: z.row(r).to_vec(), x: x.row(r).to_vec(), j: js[r].clone(), g: Some(gs[r].clone()), logpx: logpx[(r, 0)], prior_dims: dims.row(r).to_vec() })
        .collect())
}

fn check_block<T: Scalar>(p: &ContourPoint<T>, block: &[usize]) -> Result<()> {
    if block.is_empty() {
        return Err(Error::Partition("empty block".into()));
    }
    if let Some(&i) = block.iter().find(|&&i| i >= p.z.len()) {
        return Err(Error::Partition(format!("index {i} outside latent dim {}", p.z.len())));
    }
    Ok(())
}

/// Per-block contour quantities and partition mutual information at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourReport {
    pub block_ids: Vec<Vec<usize>>,
    #[serde(rename = "L_k")]
    pub l_k: Vec<f64>,
    #[serde(rename = "Lhat_k")]
    pub lhat_k: Option<Vec<f64>>,
    pub stretch_k: Vec<f64>,
    pub logpx: f64,
    #[serde(rename = "I_P")]
    pub i_p: f64,
    #[serde(rename = "Ihat_P")]
    pub ihat_p: Option<f64>,
}

/// Leaf contour log-likelihoods and one mutual-information term per internal
/// tree node; `leaf_sum + pmi_sum` reconstructs `log p(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeDecomposition<T> {
    pub leaves: Vec<T>,
    /// `(left indices, right indices, I(left; right))`, bottom-up.
    pub parents: Vec<(Vec<usize>, Vec<usize>, T)>,
}

impl<T: Scalar> TreeDecomposition<T> {
    pub fn total(&self) -> T {
        self.leaves.iter().copied().sum::<T>() + self.parents.iter().map(|p| p.2).sum::<T>()
    }
}

/// Eigenpairs of `J J^T`, eigenvalues descending.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalFrame<T: Scalar> {
    pub values: Vec<T>,
    /// Orthonormal eigenvectors as columns (`D x D`).
    pub vectors: Tensor<T>,
}

impl<T: Scalar> PrincipalFrame<T> {
    pub fn vector(&self, i: usize) -> Vec<T> {
        self.vectors.col(i)
    }
}

/// Eigendecomposition of `J J^T` with a canonical presentation: eigenvalues
/// descending and clipped at zero; each eigenvector's largest-magnitude entry
/// (first one on ties) is positive; eigenvalues closer than `1e-10` are
/// treated as tied and their vectors ordered lexicographically ascending.
/// Within a tied eigenspace the basis itself is whatever the solver returns.
pub fn principal_frame_of<T: Scalar>(j: &Tensor<T>) -> Result<PrincipalFrame<T>> {
    let (vals, vecs) = linalg::sym_eigen(&j.matmul(&j.transpose()))?;
    let n = vals.len();
    let mut cols: Vec<(T, Vec<T>)> = (0..n)
        .map(|i| {
            let mut v = vecs.col(i);
            let mut arg = 0;
            for (k, x) in v.iter().enumerate() {
                if x.abs() > v[arg].abs() {
                    arg = k;
                }
            }
            if v[arg] < T::zero() {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            (vals[i].max(T::zero()), v)
        })
        .collect();
    let tie = T::lit(1e-10);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (cols[end - 1].0 - cols[end].0).abs() < tie {
            end += 1;
        }
        cols[start..end].sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        start = end;
    }
    let values = cols.iter().map(|c| c.0).collect();
    let vectors = Tensor::from_fn(n, n, |r, c| cols[c].1[r]);
    Ok(PrincipalFrame { values, vectors })
}

/// Result of the manifold-corrected density.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldDensity<T> {
    pub log_pm: T,
    /// Positions (into the partition's blocks) of the selected contours.
    pub selected: Vec<usize>,
    pub stretch: Vec<T>,
    /// Number of latent coordinates in the selected blocks.
    pub rank: usize,
}

impl<T: Scalar> ContourPoint<T> {
    fn inverse_jacobian(&self) -> Result<&Tensor<T>> {
        self.g.as_ref().ok_or_else(|| Error::Unsupported("G-based quantities need a square stack".into()))
    }

    pub fn block_logp(&self, block: &[usize]) -> T {
        block.iter().map(|&i| self.prior_dims[i]).sum()
    }

    /// `J_k`, the columns of `J` in `block`.
    pub fn j_block(&self, block: &[usize]) -> Result<Tensor<T>> {
        check_block(self, block)?;
        Ok(self.j.select_cols(block))
    }

    /// `G_k`, the rows of `G` in `block`.
    pub fn g_block(&self, block: &[usize]) -> Result<Tensor<T>> {
        check_block(self, block)?;
        Ok(self.inverse_jacobian()?.select_rows(block))
    }

    /// `L_k = log p_k(z_k) - 1/2 log|J_k^T J_k|`.
    pub fn contour_loglik(&self, block: &[usize]) -> Result<T> {
        check_block(self, block)?;
        let ld = gram::col_gram_logdet(&self.j, block);
        if !ld.is_finite() {
            return Err(Error::Degenerate(format!("J_k^T J_k is singular for block {block:?}")));
        }
        Ok(self.block_logp(block) - T::lit(0.5) * ld)
    }

    /// `Lhat_k = log p_k(z_k) + 1/2 log|G_k G_k^T|`.
    pub fn contour_loglik_hat(&self, block: &[usize]) -> Result<T> {
        check_block(self, block)?;
        let ld = gram::row_gram_logdet(self.inverse_jacobian()?, block);
        if !ld.is_finite() {
            return Err(Error::Degenerate(format!("G_k G_k^T is singular for block {block:?}")));
        }
        Ok(self.block_logp(block) + T::lit(0.5) * ld)
    }

    /// `|J_k^T J_k|^(1/2)`.
    pub fn stretch(&self, block: &[usize]) -> Result<T> {
        check_block(self, block)?;
        Ok((T::lit(0.5) * gram::col_gram_logdet(&self.j, block)).exp())
    }

    pub fn pmi(&self, s: &[usize], t: &[usize]) -> Result<T> {
        check_block(self, s)?;
        check_block(self, t)?;
        gram::pmi_det(&self.j, s, t)
    }

    pub fn pmi_projection(&self, s: &[usize], t: &[usize]) -> Result<T> {
        check_block(self, s)?;
        check_block(self, t)?;
        gram::pmi_projection(&self.j, s, t)
    }

    pub fn pmi_hat(&self, s: &[usize], t: &[usize]) -> Result<T> {
        check_block(self, s)?;
        check_block(self, t)?;
        gram::pmi_hat_det(self.inverse_jacobian()?, s, t)
    }

    pub fn pmi_hat_projection(&self, s: &[usize], t: &[usize]) -> Result<T> {
        check_block(self, s)?;
        check_block(self, t)?;
        gram::pmi_hat_projection(self.inverse_jacobian()?, s, t)
    }

    pub fn partition_pmi(&self, p: &Partition) -> Result<T> {
        p.validate(self.z.len())?;
        Ok(gram::partition_pmi_of(&self.j, p))
    }

    pub fn partition_pmi_hat(&self, p: &Partition) -> Result<T> {
        p.validate(self.z.len())?;
        Ok(gram::partition_pmi_hat_of(self.inverse_jacobian()?, p))
    }

    /// Splits `log p(x)` along the partition's tree (a left-leaning tree if
    /// none is stored).
    pub fn tree_decompose(&self, p: &Partition) -> Result<TreeDecomposition<T>> {
        p.validate(self.z.len())?;
        let leaves = p.blocks().iter().map(|b| self.contour_loglik(b)).collect::<Result<_>>()?;
        let parents = gram::tree_terms(&self.j, p, &p.tree_or_default())?;
        Ok(TreeDecomposition { leaves, parents })
    }

    pub fn report(&self, p: &Partition) -> Result<ContourReport> {
        p.validate(self.z.len())?;
        let f = |v: T| v.as_f64();
        let l_k = p.blocks().iter().map(|b| self.contour_loglik(b).map(f)).collect::<Result<_>>()?;
        let stretch_k = p.blocks().iter().map(|b| self.stretch(b).map(f)).collect::<Result<_>>()?;
        let (lhat_k, ihat_p) = if self.g.is_some() {
            (Some(p.blocks().iter().map(|b| self.contour_loglik_hat(b).map(f)).collect::<Result<_>>()?), Some(self.partition_pmi_hat(p)?.as_f64()))
        } else {
            (None, None)
        };
        Ok(ContourReport { block_ids: p.blocks().to_vec(), l_k, lhat_k, stretch_k, logpx: self.logpx.as_f64(), i_p: self.partition_pmi(p)?.as_f64(), ihat_p })
    }

    pub fn principal_frame(&self) -> Result<PrincipalFrame<T>> {
        principal_frame_of(&self.j)
    }

    /// Sum of `L_k` over contours whose stretch is at least `epsilon` times
    /// the largest stretch at this point. Stretches within a relative `1e-12`
    /// of the threshold count as ties and are kept.
    pub fn manifold_corrected(&self, p: &Partition, epsilon: T) -> Result<ManifoldDensity<T>> {
        p.validate(self.z.len())?;
        if !(epsilon >= T::zero()) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        let stretch: Vec<T> = p.blocks().iter().map(|b| self.stretch(b)).collect::<Result<_>>()?;
        let max = stretch.iter().copied().fold(T::zero(), T::max);
        let selected: Vec<usize> = (0..stretch.len()).filter(|&k| stretch[k].is_finite() && stretch[k] > T::zero() && stretch[k] >= epsilon * max * T::lit(1.0 - 1e-12)).collect();
        if selected.is_empty() {
            return Err(Error::Degenerate("no contour has stretch above the threshold".into()));
        }
        let log_pm = selected.iter().map(|&k| self.contour_loglik(&p.blocks()[k])).sum::<Result<T>>()?;
        let rank = selected.iter().map(|&k| p.blocks()[k].len()).sum();
        Ok(ManifoldDensity { log_pm, selected, stretch, rank })
    }
}

fn one_point<T: Scalar>(v: &Tensor<T>) -> Result<()> {
    if v.rows() != 1 {
        return Err(Error::shape("expected a single 1 x n point"));
    }
    Ok(())
}

/// `J_k` at latent point `z` (`1 x d`) from `|k|` jvps.
pub fn jacobian_block_cols<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>, block: &[usize]) -> Result<Tensor<T>> {
    one_point(z)?;
    if block.is_empty() {
        return Err(Error::Partition("empty block".into()));
    }
    let g = Graph::new();
    let b = stack.bind(&g)?;
    let cols = b.jacobian_cols(g.leaf(z.clone()), block)?;
    Ok(Tensor::from_fn(stack.data_dim(), block.len(), |i, c| cols[c].value()[(0, i)]))
}

/// `G_k` at data point `x` (`1 x D`) from `|k|` vjps. Square stacks only.
pub fn jacobian_block_rows<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, block: &[usize]) -> Result<Tensor<T>> {
    one_point(x)?;
    if stack.is_injective() {
        return Err(Error::Unsupported("G does not exist for an injective stack".into()));
    }
    if block.is_empty() {
        return Err(Error::Partition("empty block".into()));
    }
    let g = Graph::new();
    let b = stack.bind(&g)?;
    let xl = g.leaf(x.clone());
    let (z, _) = b.inverse(xl)?;
    let rows = b.inverse_rows_of(xl, z, block)?;
    Ok(Tensor::from_fn(block.len(), stack.data_dim(), |r, c| rows[r].value()[(0, c)]))
}

fn at_latent<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>) -> Result<ContourPoint<T>> {
    one_point(z)?;
    Ok(evaluate_latent(stack, z)?.remove(0))
}

fn at_data<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>) -> Result<ContourPoint<T>> {
    one_point(x)?;
    if stack.is_injective() {
        return Err(Error::Unsupported("G-based quantities need a square stack".into()));
    }
    Ok(evaluate_data(stack, x)?.remove(0))
}

pub fn contour_loglik<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>, block: &[usize]) -> Result<T> {
    at_latent(stack, z)?.contour_loglik(block)
}

pub fn contour_loglik_hat<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, block: &[usize]) -> Result<T> {
    at_data(stack, x)?.contour_loglik_hat(block)
}

pub fn pmi<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>, s: &[usize], t: &[usize]) -> Result<T> {
    at_latent(stack, z)?.pmi(s, t)
}

pub fn pmi_hat<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, s: &[usize], t: &[usize]) -> Result<T> {
    at_data(stack, x)?.pmi_hat(s, t)
}

/// `(I_P, Ihat_P)` at data point `x` of a square stack.
pub fn partition_pmi<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, p: &Partition) -> Result<(T, T)> {
    let pt = at_data(stack, x)?;
    Ok((pt.partition_pmi(p)?, pt.partition_pmi_hat(p)?))
}

pub fn tree_decompose<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>, p: &Partition) -> Result<TreeDecomposition<T>> {
    at_latent(stack, z)?.tree_decompose(p)
}

pub fn principal_frame<T: Scalar>(stack: &FlowStack<T>, z: &Tensor<T>) -> Result<PrincipalFrame<T>> {
    at_latent(stack, z)?.principal_frame()
}

/// Manifold-corrected log density at each data row (`z = g(x)`).
pub fn manifold_corrected_logpdf<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, p: &Partition, epsilon: T) -> Result<Vec<ManifoldDensity<T>>> {
    evaluate_data(stack, x)?.iter().map(|pt| pt.manifold_corrected(p, epsilon)).collect()
}

/// Mean over data points of the alignment between contours (rows, ordered
/// by increasing stretch at each point) and the top `d` principal components
/// (columns, ordered by increasing eigenvalue). For a singleton block the
/// entry is `|cos|` between `J_k` and the component; for larger blocks it is
/// the norm of the component's projection onto the span of `J_k`.
pub fn similarity_matrix<T: Scalar>(stack: &FlowStack<T>, x: &Tensor<T>, p: &Partition) -> Result<Tensor<T>> {
    p.validate(stack.latent_dim())?;
    let pts = evaluate_data(stack, x)?;
    let d = stack.latent_dim();
    let mut acc = Tensor::zeros(p.len(), d);
    for pt in &pts {
        let mut order: Vec<(T, usize)> = p.blocks().iter().enumerate().map(|(k, b)| Ok((pt.stretch(b)?, k))).collect::<Result<_>>()?;
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        let frame = pt.principal_frame()?;
        for (row, &(_, k)) in order.iter().enumerate() {
            let q = linalg::projector(&pt.j_block(&p.blocks()[k])?);
            for col in 0..d {
                let w = frame.vector(d - 1 - col);
                let pw: T = (0..w.len()).map(|i| (0..w.len()).map(|l| q[(i, l)] * w[l]).sum::<T>().powi(2)).sum();
                acc[(row, col)] = acc[(row, col)] + pw.sqrt();
            }
        }
    }
    Ok(acc.scale(T::one() / T::from_usize_lossy(pts.len())))
}
