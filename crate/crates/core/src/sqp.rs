//! One SQP step: Newton system, model reduction, merit and ratio parameter
//! updates, and the adaptive stepsize.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::linalg::solve_refined;

/// Largest relative KKT solve residual accepted before reporting a
/// numerical failure.
pub const KKT_RESIDUAL_LIMIT: f64 = 1e-6;

/// Where in the admissible interval `[L, L + ψα^p]` the stepsize is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepsizeMode {
    Lower,
    #[default]
    Upper,
    Uniform,
}

impl std::str::FromStr for StepsizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lower" => Ok(Self::Lower),
            "upper" => Ok(Self::Upper),
            "uniform" | "uniform-random" => Ok(Self::Uniform),
            _ => Err(Error::InvalidConfig(format!("unknown stepsize mode `{s}`"))),
        }
    }
}

/// Tuning constants and initial merit/ratio parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqpParameters {
    /// Initial merit parameter `τ₋₁`.
    pub tau_init: f64,
    /// Initial ratio parameter `ν₋₁`.
    pub nu_init: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub psi: f64,
    /// Adaptivity exponent `p`.
    pub p: f64,
    pub kappa_grad_f: f64,
    pub kappa_grad_c: f64,
    pub stepsize_mode: StepsizeMode,
    /// Hard upper bound on the realized stepsize.
    pub stepsize_cap: f64,
}

impl Default for SqpParameters {
    fn default() -> Self {
        Self {
            tau_init: 1.0,
            nu_init: 1.0,
            sigma: 0.5,
            epsilon: 0.1,
            psi: 0.0,
            p: 1.5,
            kappa_grad_f: 1.0,
            kappa_grad_c: 1e-3,
            stepsize_mode: StepsizeMode::Upper,
            stepsize_cap: 0.1,
        }
    }
}

impl SqpParameters {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.tau_init > 0.0) || !(self.nu_init > 0.0) {
            bad.push("initial tau and nu must be > 0".to_string());
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            bad.push(format!("sigma = {} not in (0, 1)", self.sigma));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            bad.push(format!("epsilon = {} not in (0, 1)", self.epsilon));
        }
        if !(self.psi >= 0.0) {
            bad.push(format!("psi = {} < 0", self.psi));
        }
        if !(self.p >= 1.0) {
            bad.push(format!("p = {} < 1", self.p));
        }
        if !(self.kappa_grad_f > 0.0 && self.kappa_grad_c > 0.0) {
            bad.push("Lipschitz surrogates must be > 0".to_string());
        }
        if !(self.stepsize_cap > 0.0) {
            bad.push("stepsize cap must be > 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

/// Solution of the Newton system.
#[derive(Clone, Debug, PartialEq)]
pub struct KktStep {
    pub dx: DVector<f64>,
    pub dlambda: DVector<f64>,
    /// Relative residual `‖Wz + r‖ / (1 + ‖r‖)`.
    pub solve_residual: f64,
}

/// Assemble `[[B̃, G̃ᵀ], [G̃, 0]]`.
pub fn kkt_matrix(b_tilde: &DMatrix<f64>, g_tilde: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, d) = g_tilde.shape();
    let mut w = DMatrix::zeros(d + m, d + m);
    w.view_mut((0, 0), (d, d)).copy_from(b_tilde);
    w.view_mut((0, d), (d, m)).copy_from(&g_tilde.transpose());
    w.view_mut((d, 0), (m, d)).copy_from(g_tilde);
    w
}

/// Solve `W (Δx, Δλ) = −(∇̄L, c)`.
pub fn solve_kkt(
    b_tilde: &DMatrix<f64>,
    g_tilde: &DMatrix<f64>,
    grad_l: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<KktStep> {
    let (m, d) = g_tilde.shape();
    if b_tilde.shape() != (d, d) || grad_l.len() != d || c.len() != m {
        return Err(invalid_arg("KKT system blocks have inconsistent shapes"));
    }
    let w = kkt_matrix(b_tilde, g_tilde);
    let mut rhs = DVector::zeros(d + m);
    rhs.rows_mut(0, d).copy_from(&(-grad_l));
    rhs.rows_mut(d, m).copy_from(&(-c));
    let (z, res) = solve_refined(&w, &rhs).map_err(|e| {
        Error::Numerical(format!("KKT solve failed ({e}); ‖B̃‖_F = {:e}, ‖G̃‖_F = {:e}", b_tilde.norm(), g_tilde.norm()))
    })?;
    if res > KKT_RESIDUAL_LIMIT {
        return Err(Error::Numerical(format!("KKT solve residual {res:e} exceeds {KKT_RESIDUAL_LIMIT:e}")));
    }
    Ok(KktStep {
        dx: z.rows(0, d).into_owned(),
        dlambda: z.rows(d, m).into_owned(),
        solve_residual: res,
    })
}

/// `ḡᵀd + max(dᵀB̃d, 0)`, the denominator of the trial merit parameter.
pub fn curvature_term(g_bar: &DVector<f64>, dx: &DVector<f64>, b_tilde: &DMatrix<f64>) -> f64 {
    g_bar.dot(dx) + dx.dot(&(b_tilde * dx)).max(0.0)
}

/// `Δq = −τ(ḡᵀd + ½max(dᵀB̃d, 0)) + ‖c‖`.
pub fn model_reduction(dx: &DVector<f64>, tau: f64, g_bar: &DVector<f64>, b_tilde: &DMatrix<f64>, c_norm: f64) -> f64 {
    -tau * (g_bar.dot(dx) + 0.5 * dx.dot(&(b_tilde * dx)).max(0.0)) + c_norm
}

/// Sum of the magnitudes of the terms of `Δq`, which bounds its rounding
/// error up to a factor of machine precision.
pub fn model_reduction_scale(
    dx: &DVector<f64>,
    tau: f64,
    g_bar: &DVector<f64>,
    b_tilde: &DMatrix<f64>,
    c_norm: f64,
) -> f64 {
    tau * (g_bar.dot(dx).abs() + 0.5 * dx.dot(&(b_tilde * dx)).abs()) + c_norm
}

/// `Δq` at or below this fraction of [`model_reduction_scale`] carries no
/// usable digits and does not update `ν`.
pub const MODEL_REDUCTION_ROUNDING: f64 = 1e-10;

/// Relative size below which the curvature term counts as zero. For an
/// exact KKT step with `c = 0` the term vanishes analytically and is pure
/// rounding.
pub const CURVATURE_ROUNDING: f64 = 1e-12;

/// Trial merit parameter; `+∞` when the curvature term is nonpositive.
pub fn tau_trial(g_bar: &DVector<f64>, dx: &DVector<f64>, b_tilde: &DMatrix<f64>, c_norm: f64, sigma: f64) -> f64 {
    let gd = g_bar.dot(dx);
    let dbd = dx.dot(&(b_tilde * dx));
    let den = gd + dbd.max(0.0);
    if c_norm == 0.0 || den <= CURVATURE_ROUNDING * (gd.abs() + dbd.abs()) {
        f64::INFINITY
    } else {
        (1.0 - sigma) * c_norm / den
    }
}

/// Keep `τ` if it is below the trial value, else take `(1 − ε)τ_trial`.
pub fn update_tau(
    tau_prev: f64,
    g_bar: &DVector<f64>,
    dx: &DVector<f64>,
    b_tilde: &DMatrix<f64>,
    c_norm: f64,
    sigma: f64,
    epsilon: f64,
) -> f64 {
    let trial = tau_trial(g_bar, dx, b_tilde, c_norm, sigma);
    if tau_prev <= trial {
        tau_prev
    } else {
        (1.0 - epsilon) * trial
    }
}

/// Keep `ν` if it is below `Δq/‖Δx‖²`, else take `(1 − ε)` times that
/// ratio. A zero step leaves `ν` unchanged, and so does a `Δq` that is not
/// positive beyond rounding (`dq_scale` from [`model_reduction_scale`]).
/// After the `τ` update that only happens once the step and `c` have
/// shrunk to rounding level, where the ratio is noise.
pub fn update_nu(nu_prev: f64, delta_q: f64, dq_scale: f64, dx: &DVector<f64>, epsilon: f64) -> f64 {
    let n2 = dx.norm_squared();
    if n2 == 0.0 || delta_q <= MODEL_REDUCTION_ROUNDING * dq_scale {
        return nu_prev;
    }
    let trial = delta_q / n2;
    if nu_prev <= trial {
        nu_prev
    } else {
        (1.0 - epsilon) * trial
    }
}

/// The admissible interval `[L, L + ψα^p]` with `L = να/(τκ_f + κ_c)`.
pub fn stepsize_interval(params: &SqpParameters, alpha: f64, tau: f64, nu: f64) -> (f64, f64) {
    let lower = nu * alpha / (tau * params.kappa_grad_f + params.kappa_grad_c);
    (lower, lower + params.psi * alpha.powf(params.p))
}

/// Pick the stepsize within the interval according to the mode, then cap
/// it. Only the uniform mode draws from `rng`.
pub fn select_stepsize<R: Rng + ?Sized>(params: &SqpParameters, alpha: f64, tau: f64, nu: f64, rng: &mut R) -> f64 {
    let (lo, hi) = stepsize_interval(params, alpha, tau, nu);
    let a = match params.stepsize_mode {
        StepsizeMode::Lower => lo,
        StepsizeMode::Upper => hi,
        StepsizeMode::Uniform => lo + (hi - lo) * rng.random::<f64>(),
    };
    a.min(params.stepsize_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamPurpose};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn kkt_examples() {
        let b = DMatrix::identity(2, 2);
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let s = solve_kkt(&b, &g, &v(&[1.0, 1.0]), &v(&[0.0])).unwrap();
        assert!((s.dx - v(&[0.0, -1.0])).norm() < 1e-14);
        assert!((s.dlambda - v(&[-1.0])).norm() < 1e-14);
        let s = solve_kkt(&b, &g, &v(&[0.0, 0.0]), &v(&[0.0])).unwrap();
        assert_eq!(s.dx.norm() + s.dlambda.norm(), 0.0);
        let s = solve_kkt(&b, &g, &v(&[0.0, 0.0]), &v(&[2.0])).unwrap();
        assert!((s.dx - v(&[-2.0, 0.0])).norm() < 1e-14);
        // First block row: Δx₁ + Δλ = 0.
        assert!((s.dlambda - v(&[2.0])).norm() < 1e-14);
    }

    #[test]
    fn singular_kkt_is_numerical_error() {
        let b = DMatrix::zeros(2, 2);
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let err = solve_kkt(&b, &g, &v(&[1.0, 1.0]), &v(&[0.0]));
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn model_reduction_examples() {
        let b = DMatrix::identity(2, 2);
        assert_eq!(model_reduction(&v(&[0.0, 0.0]), 1.0, &v(&[1.0, 1.0]), &b, 5.0), 5.0);
        // ḡᵀd = −1, dᵀBd = 1.
        assert_eq!(model_reduction(&v(&[1.0, 0.0]), 1.0, &v(&[-1.0, 0.0]), &b, 0.0), 0.5);
        // ḡᵀd = 1, dᵀBd = −4 → clamped.
        let neg = DMatrix::identity(1, 1) * -4.0;
        assert_eq!(model_reduction(&v(&[1.0]), 2.0, &v(&[1.0]), &neg, 1.0), -1.0);
    }

    #[test]
    fn tau_examples() {
        let zero = DMatrix::zeros(1, 1);
        // Denominator = ḡᵀd = −1.
        assert_eq!(update_tau(0.7, &v(&[-1.0]), &v(&[1.0]), &zero, 1.0, 0.5, 0.1), 0.7);
        // Denominator = 1, τ_trial = 0.5.
        let t = update_tau(1.0, &v(&[1.0]), &v(&[1.0]), &zero, 1.0, 0.5, 0.1);
        assert!((t - 0.45).abs() < 1e-15);
        assert_eq!(update_tau(0.4, &v(&[1.0]), &v(&[1.0]), &zero, 1.0, 0.5, 0.1), 0.4);
    }

    #[test]
    fn nu_examples() {
        let dx = v(&[1.0, 1.0]);
        assert_eq!(update_nu(0.4, 1.0, 1.0, &dx, 0.1), 0.4);
        assert!((update_nu(1.0, 1.0, 1.0, &dx, 0.1) - 0.45).abs() < 1e-15);
        assert_eq!(update_nu(0.3, 1.0, 1.0, &v(&[0.0, 0.0]), 0.1), 0.3);
        // Δq indistinguishable from rounding against terms of size 1.
        assert_eq!(update_nu(1.0, 1e-12, 1.0, &dx, 0.1), 1.0);
    }

    #[test]
    fn stepsize_examples() {
        let mut rng = stream(0, StreamPurpose::Stepsize);
        let mut p = SqpParameters { psi: 0.0, kappa_grad_f: 1.0, kappa_grad_c: 1.0, ..Default::default() };
        for mode in [StepsizeMode::Lower, StepsizeMode::Upper, StepsizeMode::Uniform] {
            p.stepsize_mode = mode;
            assert!((select_stepsize(&p, 0.1, 1.0, 1.0, &mut rng) - 0.05).abs() < 1e-15);
        }
        let p = SqpParameters { psi: 1.0, p: 2.0, stepsize_mode: StepsizeMode::Upper, kappa_grad_f: 1.0, kappa_grad_c: 1.0, ..Default::default() };
        assert!((select_stepsize(&p, 0.1, 1.0, 1.0, &mut rng) - 0.06).abs() < 1e-15);
        let p = SqpParameters { psi: 1.0, p: 2.0, stepsize_mode: StepsizeMode::Uniform, kappa_grad_f: 1.0, kappa_grad_c: 1.0, ..Default::default() };
        for _ in 0..10_000 {
            let a = select_stepsize(&p, 0.1, 1.0, 1.0, &mut rng);
            assert!((0.05..=0.06).contains(&a));
        }
    }

    #[test]
    fn parameter_validation() {
        SqpParameters::default().validate().unwrap();
        assert!(SqpParameters { sigma: 1.0, ..Default::default() }.validate().is_err());
        assert!(SqpParameters { p: 0.5, ..Default::default() }.validate().is_err());
    }
}
