//! Jacobian and Hessian regularization keeping the KKT matrix invertible.
//!
//! The Jacobian is clamped in its singular values, with a cap on its
//! condition number. A Hessian that fails either bound has all its
//! eigenvalues clamped into `[κ₁, κ₂]`. Inputs that already satisfy the
//! bounds are left untouched, so an indefinite `B̄` with a positive definite
//! reduced Hessian passes through as is.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::linalg::{null_space_basis, sym_eigen_sorted, sym_eigenvalues, symmetrize};

/// Relative slack when testing whether a matrix already meets its bounds.
const BOUND_SLACK: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationBounds {
    /// Lower bound on the eigenvalues of `G̃G̃ᵀ`.
    pub jac_lower: f64,
    /// Upper bound on the eigenvalues of `G̃G̃ᵀ`.
    pub jac_upper: f64,
    /// Largest allowed ratio of the extreme singular values of `G̃`.
    pub jac_condition: f64,
    /// Lower bound on the reduced Hessian `ZᵀB̃Z`.
    pub hess_lower: f64,
    /// Upper bound on `‖B̃‖`.
    pub hess_upper: f64,
    pub margin: f64,
}

impl Default for RegularizationBounds {
    fn default() -> Self {
        Self {
            jac_lower: 0.05,
            jac_upper: 1e8,
            jac_condition: 100.0,
            hess_lower: 0.25,
            hess_upper: 100.0,
            margin: 1e-10,
        }
    }
}

impl RegularizationBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.jac_lower
            && self.jac_lower < self.jac_upper
            && self.jac_condition >= 1.0
            && 0.0 < self.hess_lower
            && self.hess_lower < self.hess_upper
            && self.margin >= 0.0
            && self.jac_upper.is_finite()
            && self.hess_upper.is_finite();
        if ok {
            Ok(())
        } else {
            Err(invalid_arg(format!("inconsistent regularization bounds {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianRegularization {
    pub g_tilde: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub active: bool,
}

/// Clamp the singular values of `Ḡ` into `[√κ₁, √κ₂]`, raising the
/// small ones further if needed so that `σ_max/σ_min` stays within the
/// condition cap.
pub fn regularize_jacobian(g_bar: &DMatrix<f64>, bounds: &RegularizationBounds) -> JacobianRegularization {
    let (m, d) = g_bar.shape();
    assert!(m <= d, "regularize_jacobian needs m <= d");
    let ggt = g_bar * g_bar.transpose();
    let ev = sym_eigenvalues(&ggt);
    let lo = bounds.jac_lower * (1.0 - BOUND_SLACK);
    let hi = bounds.jac_upper * (1.0 + BOUND_SLACK);
    let (e_min, e_max) = (ev.first().copied().unwrap_or(1.0), ev.last().copied().unwrap_or(1.0));
    let conditioned = e_max <= e_min * (bounds.jac_condition * bounds.jac_condition) * (1.0 + BOUND_SLACK);
    if conditioned && ev.iter().all(|&e| e >= lo && e <= hi) && g_bar.iter().all(|v| v.is_finite()) {
        return JacobianRegularization {
            g_tilde: g_bar.clone(),
            delta: DMatrix::zeros(m, d),
            active: false,
        };
    }
    let finite = if g_bar.iter().all(|v| v.is_finite()) { g_bar.clone() } else { DMatrix::zeros(m, d) };
    let svd = finite.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = orthonormal_rows(svd.v_t.expect("requested Vᵀ"));
    let s_hi = bounds.jac_upper.sqrt();
    let top = svd.singular_values.max().min(s_hi);
    let s_lo = bounds.jac_lower.sqrt().max(top / bounds.jac_condition).min(s_hi);
    let s = DVector::from_iterator(m, svd.singular_values.iter().map(|&s| s.clamp(s_lo, s_hi)));
    let g_tilde = &u * DMatrix::from_diagonal(&s) * &v_t;
    let delta = &g_tilde - g_bar;
    JacobianRegularization { g_tilde, delta, active: true }
}

/// Gram–Schmidt on the rows, replacing degenerate rows with unit vectors.
fn orthonormal_rows(mut v: DMatrix<f64>) -> DMatrix<f64> {
    let (r, d) = v.shape();
    let mut candidate = 0;
    for i in 0..r {
        loop {
            let mut row = v.row(i).transpose();
            for j in 0..i {
                let q = v.row(j).transpose();
                row -= &q * q.dot(&row);
            }
            let n = row.norm();
            if n > 1e-8 {
                v.set_row(i, &(row / n).transpose());
                break;
            }
            let mut e = DVector::zeros(d);
            e[candidate % d] = 1.0;
            candidate += 1;
            v.set_row(i, &e.transpose());
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianRegularization {
    pub b_tilde: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub active: bool,
    /// The shift-and-clamp path failed and the null-space fallback was used.
    pub fallback: bool,
}

/// Smallest eigenvalue of `ZᵀBZ`, or `+∞` when the null space is trivial.
pub fn reduced_min_eigenvalue(b: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
    if z.ncols() == 0 {
        return f64::INFINITY;
    }
    let r = symmetrize(&(z.transpose() * b * z));
    sym_eigenvalues(&r)[0]
}

/// Spectral norm of a symmetric matrix, skipping the eigen-solve when the
/// Frobenius norm already certifies the bound.
fn norm_exceeds(b: &DMatrix<f64>, bound: f64) -> bool {
    if b.norm() <= bound {
        return false;
    }
    let ev = sym_eigenvalues(b);
    ev[0].abs().max(ev[ev.len() - 1].abs()) > bound
}

/// Make `B̃` positive definite on the null space of `G̃` with bounded norm.
pub fn regularize_hessian(
    b_bar: &DMatrix<f64>,
    g_tilde: &DMatrix<f64>,
    bounds: &RegularizationBounds,
) -> HessianRegularization {
    let d = b_bar.nrows();
    let z = null_space_basis(g_tilde);
    regularize_hessian_with_basis(b_bar, &z, bounds).unwrap_or_else(|| {
        let b_tilde = hessian_fallback(g_tilde, bounds);
        let delta = &b_tilde - b_bar;
        debug_assert_eq!(b_tilde.nrows(), d);
        HessianRegularization { b_tilde, delta, active: true, fallback: true }
    })
}

fn regularize_hessian_with_basis(
    b_bar: &DMatrix<f64>,
    z: &DMatrix<f64>,
    bounds: &RegularizationBounds,
) -> Option<HessianRegularization> {
    let d = b_bar.nrows();
    let upper = bounds.hess_upper * (1.0 + BOUND_SLACK);
    let lam = reduced_min_eigenvalue(b_bar, z);
    if b_bar.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if lam >= bounds.hess_lower && !norm_exceeds(b_bar, upper) {
        return Some(HessianRegularization {
            b_tilde: b_bar.clone(),
            delta: DMatrix::zeros(d, d),
            active: false,
            fallback: false,
        });
    }
    let (vals, vecs) = sym_eigen_sorted(b_bar);
    let clamped = DVector::from_iterator(
        d,
        vals.iter().map(|v| v.clamp(bounds.hess_lower + bounds.margin, bounds.hess_upper)),
    );
    let b = symmetrize(&(&vecs * DMatrix::from_diagonal(&clamped) * vecs.transpose()));
    let delta = &b - b_bar;
    Some(HessianRegularization { b_tilde: b, delta, active: true, fallback: false })
}

/// `κ₁I + δG̃ᵀG̃`. The reduced Hessian is exactly `κ₁I` for any `δ ≥ 0`;
/// `δ = 3.5κ₁/λ_min(G̃G̃ᵀ)` makes the full matrix positive definite, and it
/// is reduced if needed to respect the norm bound.
pub fn hessian_fallback(g_tilde: &DMatrix<f64>, bounds: &RegularizationBounds) -> DMatrix<f64> {
    let d = g_tilde.ncols();
    let k1 = bounds.hess_lower;
    let gtg = g_tilde.transpose() * g_tilde;
    let ev = sym_eigenvalues(&(g_tilde * g_tilde.transpose()));
    let (gamma_a, s_max) = (ev[0].max(f64::MIN_POSITIVE), ev[ev.len() - 1]);
    let mut delta = 3.5 * k1 / gamma_a;
    if k1 + delta * s_max > bounds.hess_upper {
        delta = ((bounds.hess_upper - k1) / s_max).max(0.0);
    }
    symmetrize(&(DMatrix::identity(d, d) * k1 + gtg * delta))
}
