//! Small dense helpers shared by the regularizers, the KKT solver and the
//! inference layer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Eigen-decomposition with eigenpairs sorted by ascending eigenvalue.
pub fn sym_eigen_sorted(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a)
        .into_iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest singular value of a general matrix.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let ata = a.transpose() * a;
    sym_eigenvalues(&ata).last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Orthonormal basis of the null space of a full-row-rank `m × d` matrix,
/// returned as a `d × (d − m)` matrix.
pub fn null_space_basis(g: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, d) = g.shape();
    let gtg = g.transpose() * g;
    let (_, vectors) = sym_eigen_sorted(&gtg);
    vectors.columns(0, d.saturating_sub(m)).into_owned()
}

/// `(A + Aᵀ) / 2`, bit-exactly symmetric.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// Dense LU solve with one step of iterative refinement. Returns the solution
/// and the relative residual `‖Ax − b‖ / (1 + ‖b‖)`.
pub fn solve_refined(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let lu = a.clone().lu();
    let mut x = lu
        .solve(rhs)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))?;
    let r = rhs - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let res = (a * &x - rhs).norm() / (1.0 + rhs.norm());
    if !res.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite linear solve".into()));
    }
    Ok((x, res))
}

/// Dense inverse, failing on singular input.
pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("matrix is singular".into()))
}
