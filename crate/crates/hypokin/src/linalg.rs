//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Eigen-decomposition of the symmetric pencil `A u = μ B u`, `B` positive
/// definite. Eigenvalues are ascending; eigenvectors are B-orthonormal.
pub(crate) fn sym_gen_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NoConvergence("Cholesky of a metric (not positive definite)".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NoConvergence("triangular inverse".into()))?;
    let c = &linv * symmetrize(a) * linv.transpose();
    let eig = SymmetricEigen::new(symmetrize(&c));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let y = DMatrix::from_fn(c.nrows(), order.len(), |r, k| eig.eigenvectors[(r, order[k])]);
    let vectors = linv.transpose() * y;
    Ok((values, vectors))
}

pub(crate) fn sym_gen_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    sym_gen_eig(a, b).map(|(v, _)| v)
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Orthonormal basis (columns) of the Euclidean complement of `u`.
pub(crate) fn complement_basis(u: &DVector<f64>) -> DMatrix<f64> {
    let n = u.len();
    let norm = u.norm();
    let mut w = u / norm;
    // Householder reflector sending u/|u| to ±e₀
    let s = if w[0] >= 0.0 { 1.0 } else { -1.0 };
    w[0] += s;
    let wn = w.norm();
    w /= wn;
    let h = DMatrix::identity(n, n) - 2.0 * &w * w.transpose();
    h.columns(1, n - 1).into_owned()
}

/// Restricts a symmetric pencil to the complement of `u` (Euclidean) and
/// returns its ascending eigenvalues together with the lifted eigenvectors.
pub(crate) fn restricted_pencil(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DVector<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let q = complement_basis(u);
    let qt = q.transpose();
    let (vals, vecs) = sym_gen_eig(&(&qt * a * &q), &(&qt * b * &q))?;
    Ok((vals, q * vecs))
}

/// `exp(t·L)` for an operator that is self-adjoint in the diagonal metric
/// `W`, computed from the eigen-decomposition of `W^{1/2} L W^{-1/2}`.
pub(crate) fn expm_w_selfadjoint(l: &DMatrix<f64>, w: &[f64], t: f64) -> DMatrix<f64> {
    let n = w.len();
    let s = DMatrix::from_fn(n, n, |i, j| w[i].sqrt() * l[(i, j)] / w[j].sqrt());
    let eig = SymmetricEigen::new(symmetrize(&s));
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| (t * x).exp()));
    let e = q * d * q.transpose();
    DMatrix::from_fn(n, n, |i, j| e[(i, j)] * w[j].sqrt() / w[i].sqrt())
}

/// Eigenvalues of a general real matrix.
///
/// nalgebra's Schur iteration stalls on the block-structured transport
/// operators, so the nonsymmetric problems go through faer.
pub(crate) fn eigenvalues_general(a: DMatrix<f64>) -> Result<Vec<Complex64>> {
    let m = faer::Mat::<f64>::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)]);
    let ev = m
        .eigenvalues()
        .map_err(|e| Error::NoConvergence(format!("nonsymmetric eigensolve ({e:?})")))?;
    Ok(ev.iter().map(|z| Complex64::new(z.re, z.im)).collect())
}

/// Largest real part among the eigenvalues of a complex matrix.
pub(crate) fn max_real_eigenvalue_complex(a: &DMatrix<Complex64>) -> Result<f64> {
    let m = faer::Mat::<faer::c64>::from_fn(a.nrows(), a.ncols(), |i, j| {
        let z = a[(i, j)];
        faer::c64::new(z.re, z.im)
    });
    let ev = m
        .eigenvalues()
        .map_err(|e| Error::NoConvergence(format!("complex eigensolve ({e:?})")))?;
    Ok(ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}
