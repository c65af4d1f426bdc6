use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A computation that can be recorded into a graph from a single input.
///
/// Recording is define-by-run: every evaluation re-executes the program, so
/// identical inputs always give bit-identical outputs.
pub trait DiffProgram<T: Scalar> {
    fn record<'g>(&self, input: Var<'g, T>) -> Result<Var<'g, T>>;
}

impl<T, F> DiffProgram<T> for F
where
    T: Scalar,
    F: for<'g> Fn(Var<'g, T>) -> Result<Var<'g, T>>,
{
    fn record<'g>(&self, input: Var<'g, T>) -> Result<Var<'g, T>> {
        self(input)
    }
}

/// Pins a closure to the higher-ranked signature [`DiffProgram`] needs;
/// plain closures do not infer `for<'g>` on their own.
pub fn program<T: Scalar, F>(f: F) -> F
where
    F: for<'g> Fn(Var<'g, T>) -> Result<Var<'g, T>>,
{
    f
}

/// Output and Jacobian-vector product `J * tangent`.
pub fn jvp<T: Scalar, P: DiffProgram<T> + ?Sized>(program: &P, input: &Tensor<T>, tangent: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if input.shape() != tangent.shape() {
        return Err(Error::shape(format!("tangent {:?} vs input {:?}", tangent.shape(), input.shape())));
    }
    let g = Graph::new();
    let x = g.leaf(input.clone());
    let y = program.record(x)?;
    let t = g.constant(tangent.clone());
    let jt = g.jvp(&[y], &[x], &[t])?[0];
    g.check_finite()?;
    Ok((y.tensor(), jt.tensor()))
}

/// Output and vector-Jacobian product `cotangent^T * J`.
pub fn vjp<T: Scalar, P: DiffProgram<T> + ?Sized>(program: &P, input: &Tensor<T>, cotangent: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::new();
    let x = g.leaf(input.clone());
    let y = program.record(x)?;
    if y.shape() != cotangent.shape() {
        return Err(Error::shape(format!("cotangent {:?} vs output {:?}", cotangent.shape(), y.shape())));
    }
    let c = g.constant(cotangent.clone());
    let gx = g.vjp(y, c, &[x])?[0];
    g.check_finite()?;
    Ok((y.tensor(), gx.tensor()))
}

/// Full Jacobian of a program at a single point given as a `1 x n` row,
/// assembled column by column from `n` jvps. Returns an `m x n` matrix.
pub fn jacobian<T: Scalar, P: DiffProgram<T> + ?Sized>(program: &P, input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rows() != 1 {
        return Err(Error::shape("jacobian expects a single 1 x n point"));
    }
    let n = input.cols();
    let g = Graph::new();
    let x = g.leaf(input.clone());
    let y = program.record(x)?;
    if y.rows() != 1 {
        return Err(Error::shape("jacobian expects a single-row output"));
    }
    let m = y.cols();
    let mut j = Tensor::zeros(m, n);
    for c in 0..n {
        let mut e = Tensor::zeros(1, n);
        e[(0, c)] = T::one();
        let col = g.jvp(&[y], &[x], &[g.constant(e)])?[0].tensor();
        for r in 0..m {
            j[(r, c)] = col[(0, r)];
        }
    }
    g.check_finite()?;
    Ok(j)
}

/// Gradient of a scalar loss with respect to `params`.
///
/// The loss may itself call [`Graph::jvp`] or [`Graph::vjp`]; the nested
/// derivatives are differentiated exactly.
pub fn grad<T: Scalar, P: DiffProgram<T> + ?Sized>(loss: &P, params: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = g.leaf(params.clone());
    let l = loss.record(p)?;
    if l.shape() != [1, 1] {
        return Err(Error::shape(format!("loss must be 1x1, got {:?}", l.shape())));
    }
    g.check_finite()?;
    let gp = g.vjp(l, g.scalar(T::one()), &[p])?[0].tensor();
    if let Some(index) = gp.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    Ok(gp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(a: Tensor<f64>) -> impl for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>> {
        let at = a.transpose();
        program(move |z: Var<f64>| Ok(z.matmul(z.graph().constant(at.clone()))))
    }

    #[test]
    fn identity_jvp_and_vjp() {
        let id = program(|z: Var<f64>| Ok(z));
        let (_, jt) = jvp(&id, &Tensor::row_vector(&[0.3, -1.0]), &Tensor::row_vector(&[1.0, 0.0])).unwrap();
        assert_eq!(jt, Tensor::row_vector(&[1.0, 0.0]));
        let (_, gc) = vjp(&id, &Tensor::row_vector(&[0.3, -1.0]), &Tensor::row_vector(&[0.0, 1.0])).unwrap();
        assert_eq!(gc, Tensor::row_vector(&[0.0, 1.0]));
    }

    #[test]
    fn linear_map_jvp_column_and_vjp_row() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let (_, jt) = jvp(&linear(a), &Tensor::row_vector(&[0.5, 0.5]), &Tensor::row_vector(&[1.0, 1.0])).unwrap();
        assert_eq!(jt, Tensor::row_vector(&[2.0, 3.0]));

        let a = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let (_, row) = vjp(&linear(a), &Tensor::row_vector(&[0.1, 0.2]), &Tensor::row_vector(&[0.0, 1.0])).unwrap();
        assert_eq!(row, Tensor::row_vector(&[0.0, 1.0]));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let id = program(|z: Var<f64>| Ok(z));
        assert!(matches!(jvp(&id, &Tensor::row_vector(&[1.0, 2.0]), &Tensor::row_vector(&[1.0])), Err(Error::Shape(_))));
        assert!(matches!(vjp(&id, &Tensor::row_vector(&[1.0, 2.0]), &Tensor::row_vector(&[1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let loss = program(|p: Var<f64>| Ok(p.square().sum().scale(0.5)));
        let theta = Tensor::row_vector(&[0.5, -2.0, 3.0]);
        assert_eq!(grad(&loss, &theta).unwrap(), theta);
    }

    #[test]
    fn non_finite_intermediate_reported() {
        let bad = program(|z: Var<f64>| Ok(z.ln()));
        let err = jvp(&bad, &Tensor::row_vector(&[-1.0]), &Tensor::row_vector(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log", .. }), "{err}");
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let loss = program(|p: Var<f64>| Ok(p.sqrt().sum()));
        let err = grad(&loss, &Tensor::row_vector(&[1.0, 0.0, 4.0])).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }), "{err}");
    }
}
