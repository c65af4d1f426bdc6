//! Contour identities on explicit Jacobians. `j` is a `D x d` Jacobian of
//! the generative map and `g` a `d x D` Jacobian of its (left) inverse;
//! blocks are sets of latent indices.

use super::partition::{Partition, Tree};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_disjoint(s: &[usize], t: &[usize]) -> Result<()> {
    if s.is_empty() || t.is_empty() {
        return Err(Error::Partition("empty block".into()));
    }
    if s.iter().any(|i| t.contains(i)) {
        return Err(Error::Partition("blocks overlap".into()));
    }
    Ok(())
}

fn union(s: &[usize], t: &[usize]) -> Vec<usize> {
    s.iter().chain(t).copied().collect()
}

/// `log|J_k^T J_k|`.
pub fn col_gram_logdet<T: Scalar>(j: &Tensor<T>, block: &[usize]) -> T {
    linalg::gram_logdet(&j.select_cols(block))
}

/// `log|G_k G_k^T|`.
pub fn row_gram_logdet<T: Scalar>(g: &Tensor<T>, block: &[usize]) -> T {
    linalg::gram_logdet(&g.select_rows(block).transpose())
}

/// Determinant form: `-1/2 log|J_{s+t}^T J_{s+t}| + 1/2 log|J_s^T J_s| + 1/2 log|J_t^T J_t|`.
pub fn pmi_det<T: Scalar>(j: &Tensor<T>, s: &[usize], t: &[usize]) -> Result<T> {
    check_disjoint(s, t)?;
    let h = T::lit(0.5);
    Ok(h * (col_gram_logdet(j, s) + col_gram_logdet(j, t) - col_gram_logdet(j, &union(s, t))))
}

/// Projection form: `-1/2 log|I - P_s P_t|` with `P_k` the orthogonal
/// projector onto the columns of `J_k`.
pub fn pmi_projection<T: Scalar>(j: &Tensor<T>, s: &[usize], t: &[usize]) -> Result<T> {
    check_disjoint(s, t)?;
    let ps = linalg::projector(&j.select_cols(s));
    let pt = linalg::projector(&j.select_cols(t));
    Ok(-T::lit(0.5) * log_det_i_minus(&ps.matmul(&pt)))
}

/// `1/2 log|G_{s+t} G_{s+t}^T| - 1/2 log|G_s G_s^T| - 1/2 log|G_t G_t^T|`.
pub fn pmi_hat_det<T: Scalar>(g: &Tensor<T>, s: &[usize], t: &[usize]) -> Result<T> {
    check_disjoint(s, t)?;
    let h = T::lit(0.5);
    Ok(h * (row_gram_logdet(g, &union(s, t)) - row_gram_logdet(g, s) - row_gram_logdet(g, t)))
}

/// `1/2 log|I - Q_s Q_t|` with `Q_k` the projector onto the rows of `G_k`.
pub fn pmi_hat_projection<T: Scalar>(g: &Tensor<T>, s: &[usize], t: &[usize]) -> Result<T> {
    check_disjoint(s, t)?;
    let qs = linalg::projector(&g.select_rows(s).transpose());
    let qt = linalg::projector(&g.select_rows(t).transpose());
    Ok(T::lit(0.5) * log_det_i_minus(&qs.matmul(&qt)))
}

fn log_det_i_minus<T: Scalar>(m: &Tensor<T>) -> T {
    let n = m.rows();
    let a = Tensor::eye(n).sub(m);
    let (sign, logabs) = linalg::slogdet(&a);
    if sign > T::zero() {
        logabs
    } else {
        T::neg_infinity()
    }
}

/// `I_P = -1/2 log|J^T J| + 1/2 sum_k log|J_k^T J_k|`.
pub fn partition_pmi_of<T: Scalar>(j: &Tensor<T>, p: &Partition) -> T {
    let h = T::lit(0.5);
    let all = linalg::gram_logdet(j);
    h * (p.blocks().iter().map(|b| col_gram_logdet(j, b)).sum::<T>() - all)
}

/// `Ihat_P = 1/2 log|G G^T| - 1/2 sum_k log|G_k G_k^T|`.
pub fn partition_pmi_hat_of<T: Scalar>(g: &Tensor<T>, p: &Partition) -> T {
    let h = T::lit(0.5);
    let all = linalg::gram_logdet(&g.transpose());
    h * (all - p.blocks().iter().map(|b| row_gram_logdet(g, b)).sum::<T>())
}

/// One `I(left; right)` term per internal tree node, bottom-up, with the
/// latent indices on each side.
pub fn tree_terms<T: Scalar>(j: &Tensor<T>, p: &Partition, tree: &Tree) -> Result<Vec<(Vec<usize>, Vec<usize>, T)>> {
    let mut nodes = Vec::new();
    tree.internal_nodes(&mut nodes);
    nodes
        .into_iter()
        .map(|(l, r)| {
            let (s, t) = (p.union(&l.leaves()), p.union(&r.leaves()));
            let v = pmi_det(j, &s, &t)?;
            Ok((s, t, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sheared_two_by_two() {
        let j = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let half_ln2 = 0.5 * 2f64.ln();
        assert!((pmi_det(&j, &[0], &[1]).unwrap() - half_ln2).abs() < 1e-15);
        assert!((pmi_projection(&j, &[0], &[1]).unwrap() - half_ln2).abs() < 1e-14);
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!((pmi_hat_det(&g, &[0], &[1]).unwrap() + half_ln2).abs() < 1e-15);
        assert!((pmi_hat_projection(&g, &[0], &[1]).unwrap() + half_ln2).abs() < 1e-14);
    }

    #[test]
    fn overlapping_blocks_rejected() {
        let j = Tensor::<f64>::eye(2);
        assert!(pmi_det(&j, &[0], &[0, 1]).is_err());
        assert!(pmi_det(&j, &[], &[1]).is_err());
    }
}
