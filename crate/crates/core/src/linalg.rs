//! Small dense linear algebra on [`Tensor`] matrices: the Gram determinants,
//! projections and eigenpairs the contour computations are built from.
//!
//! Matrices here are at most a few dozen entries on a side, so the routines
//! favour accuracy over blocking.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower Cholesky factor of a symmetric positive definite matrix, or `None`
/// if a pivot is not strictly positive.
pub fn cholesky<T: Scalar>(a: &Tensor<T>) -> Option<Tensor<T>> {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// `log|A|` for a symmetric positive semi-definite matrix.
///
/// Tries Cholesky, then Cholesky with a `1e-12` diagonal jitter, then a
/// symmetric eigendecomposition with eigenvalues clipped below `1e-300`.
pub fn spd_logdet<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    let two = T::lit(2.0);
    if let Some(l) = cholesky(a) {
        return Ok((0..a.rows()).map(|i| l[(i, i)].ln()).sum::<T>() * two);
    }
    let mut jittered = a.clone();
    for i in 0..a.rows() {
        jittered[(i, i)] = jittered[(i, i)] + T::lit(1e-12);
    }
    if let Some(l) = cholesky(&jittered) {
        return Ok((0..a.rows()).map(|i| l[(i, i)].ln()).sum::<T>() * two);
    }
    let (vals, _) = sym_eigen(a)?;
    let floor = T::lit(1e-300);
    Ok(vals.iter().map(|&v| v.max(floor).ln()).sum())
}

/// Thin Householder QR of a tall `m x k` matrix (`m >= k`): returns `Q`
/// (`m x k`, orthonormal columns) and upper-triangular `R` (`k x k`).
pub fn qr<T: Scalar>(a: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.rows(), a.cols());
    assert!(m >= k, "qr expects a tall matrix, got {m}x{k}");
    let mut r = a.clone();
    let mut vs: Vec<Vec<T>> = Vec::with_capacity(k);
    for j in 0..k {
        let norm = (j..m).map(|i| r[(i, j)] * r[(i, j)]).sum::<T>().sqrt();
        let mut v: Vec<T> = (j..m).map(|i| r[(i, j)]).collect();
        if norm == T::zero() {
            vs.push(vec![T::zero(); m - j]);
            continue;
        }
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] = v[0] - alpha;
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 > T::zero() {
            for c in j..k {
                let dot: T = (j..m).map(|i| v[i - j] * r[(i, c)]).sum();
                let f = T::lit(2.0) * dot / vnorm2;
                for i in j..m {
                    r[(i, c)] = r[(i, c)] - f * v[i - j];
                }
            }
        }
        vs.push(v);
    }
    // accumulate Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I
    let mut q = Tensor::from_fn(m, k, |i, j| if i == j { T::one() } else { T::zero() });
    for j in (0..k).rev() {
        let v = &vs[j];
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 == T::zero() {
            continue;
        }
        for c in 0..k {
            let dot: T = (j..m).map(|i| v[i - j] * q[(i, c)]).sum();
            let f = T::lit(2.0) * dot / vnorm2;
            for i in j..m {
                q[(i, c)] = q[(i, c)] - f * v[i - j];
            }
        }
    }
    let r = Tensor::from_fn(k, k, |i, j| if j >= i { r[(i, j)] } else { T::zero() });
    (q, r)
}

/// `log|A^T A|` for a tall `m x k` matrix, computed from the QR factor so the
/// condition number of `A` is not squared.
pub fn gram_logdet<T: Scalar>(a: &Tensor<T>) -> T {
    if a.cols() == 0 {
        return T::zero();
    }
    let (_, r) = qr(a);
    (0..r.rows()).map(|i| r[(i, i)].abs().ln()).sum::<T>() * T::lit(2.0)
}

/// Orthogonal projector onto the column space of a full-column-rank `A`,
/// i.e. `A (A^T A)^{-1} A^T`, formed as `Q Q^T`.
pub fn projector<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (q, _) = qr(a);
    q.matmul(&q.transpose())
}

/// LU factorisation with partial pivoting.
pub struct Lu<T> {
    lu: Tensor<T>,
    perm: Vec<usize>,
    sign: T,
}

impl<T: Scalar> Lu<T> {
    pub fn new(a: &Tensor<T>) -> Self {
        let n = a.rows();
        assert_eq!(n, a.cols(), "LU of a non-square matrix");
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| lu[(i, k)].abs().partial_cmp(&lu[(j, k)].abs()).unwrap_or(std::cmp::Ordering::Equal)).unwrap_or(k);
            if p != k {
                for c in 0..n {
                    let t = lu[(k, c)];
                    lu[(k, c)] = lu[(p, c)];
                    lu[(p, c)] = t;
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let piv = lu[(k, k)];
            if piv == T::zero() {
                continue;
            }
            for i in k + 1..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                for c in k + 1..n {
                    lu[(i, c)] = lu[(i, c)] - f * lu[(k, c)];
                }
            }
        }
        Self { lu, perm, sign }
    }

    /// Sign and log-magnitude of the determinant; sign is zero when singular.
    pub fn slogdet(&self) -> (T, T) {
        let mut sign = self.sign;
        let mut logabs = T::zero();
        for i in 0..self.lu.rows() {
            let d = self.lu[(i, i)];
            if d == T::zero() {
                return (T::zero(), T::neg_infinity());
            }
            sign = sign * d.signum();
            logabs = logabs + d.abs().ln();
        }
        (sign, logabs)
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Tensor<T>) -> Tensor<T> {
        let n = self.lu.rows();
        assert_eq!(b.rows(), n);
        let mut x = b.select_rows(&self.perm);
        for c in 0..b.cols() {
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s = s - self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s = s - self.lu[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.lu[(i, i)];
            }
        }
        x
    }

    /// Unit lower factor, upper factor and the row permutation with `P A = L U`.
    pub fn factors(&self) -> (Tensor<T>, Tensor<T>, Vec<usize>) {
        let n = self.lu.rows();
        let l = Tensor::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.lu[(i, j)],
            std::cmp::Ordering::Equal => T::one(),
            std::cmp::Ordering::Less => T::zero(),
        });
        let u = Tensor::from_fn(n, n, |i, j| if j >= i { self.lu[(i, j)] } else { T::zero() });
        (l, u, self.perm.clone())
    }
}

pub fn slogdet<T: Scalar>(a: &Tensor<T>) -> (T, T) {
    Lu::new(a).slogdet()
}

pub fn inverse<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Lu::new(a).solve(&Tensor::eye(a.rows()))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns. Signs and the order within exactly repeated eigenvalues are not
/// normalised here.
pub fn sym_eigen<T: Scalar>(a: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
    const MAX_SWEEPS: usize = 100;
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::shape(format!("eigendecomposition of a {}x{} matrix", n, a.cols())));
    }
    // symmetrise against round-off
    let mut m = Tensor::from_fn(n, n, |i, j| (a[(i, j)] + a[(j, i)]) * T::lit(0.5));
    let mut v = Tensor::eye(n);
    let scale = m.frobenius();
    let tol = T::epsilon() * T::epsilon() * scale * scale;
    let mut converged = n < 2 || scale == T::zero();
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        sweep += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        let off: T = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[(i, j)] * m[(i, j)]).sum();
        converged = off <= tol;
    }
    if !converged {
        return Err(Error::NoConvergence(MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = v.select_cols(&order);
    Ok((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(seed: u64, r: usize, c: usize) -> Tensor<f64> {
        // small LCG keeps these unit tests dependency free
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(r, c, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let a = rand_mat(3, 5, 3);
        let (q, r) = qr(&a);
        assert!(q.matmul(&r).max_abs_diff(&a) < 1e-13);
        assert!(q.transpose().matmul(&q).max_abs_diff(&Tensor::eye(3)) < 1e-13);
    }

    #[test]
    fn gram_logdet_matches_cholesky_route() {
        let a = rand_mat(9, 6, 4);
        let g = a.transpose().matmul(&a);
        assert!((gram_logdet(&a) - spd_logdet(&g).unwrap()).abs() < 1e-11);
    }

    #[test]
    fn spd_logdet_falls_back_on_singular_input() {
        let g: Tensor<f64> = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let v = spd_logdet(&g).unwrap();
        assert!(v.is_finite() && v < -20.0);
    }

    #[test]
    fn lu_solves_and_slogdet() {
        let a = Tensor::from_rows(&[vec![0.0, 2.0], vec![3.0, 1.0]]);
        let (s, l) = slogdet(&a);
        assert_eq!(s, -1.0);
        assert!((l - 6.0f64.ln()).abs() < 1e-15);
        assert!(inverse(&a).matmul(&a).max_abs_diff(&Tensor::eye(2)) < 1e-15);
    }

    #[test]
    fn jacobi_diagonalises() {
        let b = rand_mat(11, 5, 5);
        let a = b.matmul(&b.transpose());
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let recon = vecs.matmul(&Tensor::diag(&vals)).matmul(&vecs.transpose());
        assert!(recon.max_abs_diff(&a) < 1e-12);
    }
}
