//! Online inference: dual least-squares estimates, the plug-in covariance,
//! confidence intervals and the closed-form limiting covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::linalg::{inverse, sym_eigenvalues, sym_norm, symmetrize};
use crate::problem::ProblemInstance;
use crate::spsa::DirectionDistribution;

/// Quadratic forms below this are treated as numerical failures rather
/// than rounding noise.
pub const NEGATIVE_FORM_TOL: f64 = 1e-12;

/// Running mean of the outer products `vvᵀ`, `v = ∇̂F + ∇̂cᵀλ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub s_avg: DMatrix<f64>,
    pub count: u64,
}

impl CovarianceEstimate {
    pub fn new(d: usize) -> Self {
        Self { s_avg: DMatrix::zeros(d, d), count: 0 }
    }

    /// Add one outer product `vvᵀ`.
    pub fn push(&mut self, v: &DVector<f64>) {
        let n = self.count as f64;
        let w = 1.0 / (n + 1.0);
        let d = v.len();
        for j in 0..d {
            for i in 0..d {
                let s = &mut self.s_avg[(i, j)];
                *s += (v[i] * v[j] - *s) * w;
            }
        }
        self.count += 1;
    }
}

/// Fold `(∇̂F + ∇̂cᵀλ)(∇̂F + ∇̂cᵀλ)ᵀ` into the running average.
pub fn accumulate_outer_product(
    state: &mut CovarianceEstimate,
    g_hat: &DVector<f64>,
    jac_hat: &DMatrix<f64>,
    lambda: &DVector<f64>,
) -> Result<()> {
    let d = state.s_avg.nrows();
    if g_hat.len() != d || jac_hat.shape() != (lambda.len(), d) {
        return Err(invalid_arg("outer-product terms have inconsistent shapes"));
    }
    let v = g_hat + jac_hat.tr_mul(lambda);
    state.push(&v);
    Ok(())
}

/// `W̃⁻¹ diag(S, 0) W̃⁻¹`.
pub fn plugin_covariance(state: &CovarianceEstimate, w_tilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if state.count == 0 {
        return Err(invalid_arg("covariance estimate has no accumulated terms"));
    }
    let d = state.s_avg.nrows();
    let n = w_tilde.nrows();
    if w_tilde.ncols() != n || n < d {
        return Err(invalid_arg("W̃ has the wrong shape"));
    }
    let winv = inverse(w_tilde)?;
    Ok(sandwich(&winv, &state.s_avg))
}

/// `A diag(S, 0) Aᵀ` with `A` symmetric in exact arithmetic; the result is
/// symmetrized.
fn sandwich(winv: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let d = s.nrows();
    let left = winv.columns(0, d);
    let right = winv.rows(0, d);
    symmetrize(&(left * s * right))
}

/// `λ = −(G̃G̃ᵀ)⁻¹G̃ḡ`.
pub fn dual_ls_estimate(g_tilde: &DMatrix<f64>, g_bar: &DVector<f64>) -> Result<DVector<f64>> {
    if g_tilde.ncols() != g_bar.len() {
        return Err(invalid_arg("dual estimate: shapes do not match"));
    }
    let ggt = g_tilde * g_tilde.transpose();
    let rhs = -(g_tilde * g_bar);
    ggt.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Numerical("dual estimate: G̃G̃ᵀ is not positive definite".into()))
}

/// `‖∇f(x) + G(x)ᵀλ‖ + ‖c(x)‖` with exact derivatives.
pub fn kkt_residual(prob: &ProblemInstance, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
    prob.kkt_residual(x, lambda)
}

/// Standard normal quantile, Wichura's AS241 (PPND16), relative accuracy
/// about 1e-16.
pub fn normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Two-sided critical value `z_{1−φ/2}`.
pub fn critical_value(phi: f64) -> Result<f64> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(invalid_arg(format!("significance level must be in (0, 1), got {phi}")));
    }
    Ok(normal_quantile(1.0 - phi / 2.0))
}

/// `wᵀ(x, λ) ± z_{1−φ/2} √(ᾱ ω wᵀΣw)`.
pub fn confidence_interval(
    w: &DVector<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    sigma: &DMatrix<f64>,
    alpha_bar: f64,
    omega: f64,
    phi: f64,
) -> Result<(f64, f64)> {
    let (d, m) = (x.len(), lambda.len());
    if w.len() != d + m || sigma.shape() != (d + m, d + m) {
        return Err(invalid_arg("confidence interval: shapes do not match"));
    }
    let z = critical_value(phi)?;
    let center = w.rows(0, d).dot(x) + w.rows(d, m).dot(lambda);
    let form = w.dot(&(sigma * w));
    let half = half_width(form, alpha_bar, omega, z)?;
    Ok((center - half, center + half))
}

/// `z √(ᾱ ω q)` with `q` a quadratic form; small negatives are clamped.
pub fn half_width(form: f64, alpha_bar: f64, omega: f64, z: f64) -> Result<f64> {
    if form < -NEGATIVE_FORM_TOL || form.is_nan() {
        return Err(Error::Numerical(format!("negative variance {form:e} in confidence interval")));
    }
    Ok(z * (alpha_bar * omega * form.max(0.0)).sqrt())
}

/// `ω = 0.5` if `p₁ < 1`, else `ζι₁/(2ζι₁ − 1)` (requires `ζι₁ > 0.5`).
pub fn omega_scaling(p1: f64, zeta: f64, iota1: f64) -> Result<f64> {
    if p1 < 1.0 {
        return Ok(0.5);
    }
    let a = zeta * iota1;
    if !(a > 0.5) {
        return Err(Error::InvalidConfig(format!("p1 = 1 needs zeta * iota1 > 0.5, got {a}")));
    }
    Ok(a / (2.0 * a - 1.0))
}

/// `E[Δ²]·E[Δ⁻²]` for one entry of the direction distribution.
pub fn moment_product(dist: &DirectionDistribution) -> f64 {
    match dist {
        DirectionDistribution::Rademacher => 1.0,
        DirectionDistribution::ScaledDiscrete { levels } => {
            let n = levels.len() as f64;
            let m2: f64 = levels.iter().map(|l| l * l).sum::<f64>() / n;
            let mi2: f64 = levels.iter().map(|l| 1.0 / (l * l)).sum::<f64>() / n;
            m2 * mi2
        }
    }
}

/// `E[Δ⁻¹ΔᵀSΔΔ⁻ᵀ]`. Off-diagonal entries are `2S_ij`; diagonal entries are
/// `S_ii + μ Σ_{k≠i} S_kk` with `μ = E[Δ²]E[Δ⁻²]` (1 for Rademacher, giving
/// `tr(S)I + 2(S − Diag S)`).
pub fn spsa_covariance_block(s: &DMatrix<f64>, dist: &DirectionDistribution) -> DMatrix<f64> {
    let d = s.nrows();
    let mu = moment_product(dist);
    let tr = s.trace();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            s[(i, i)] + mu * (tr - s[(i, i)])
        } else {
            s[(i, j)] + s[(j, i)]
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoreticalCovariances {
    /// Limiting covariance of the derivative-free method.
    pub sigma_star: DMatrix<f64>,
    /// Limiting covariance with exact stochastic gradients.
    pub sigma_op: DMatrix<f64>,
    /// `‖Σ⋆ − Σ⋆_op‖` (spectral norm).
    pub gap: f64,
}

/// Limiting covariances with and without the direction-induced inflation.
pub fn theoretical_covariances(
    cov_grad: &DMatrix<f64>,
    w_star: &DMatrix<f64>,
    dist: &DirectionDistribution,
) -> Result<TheoreticalCovariances> {
    let d = cov_grad.nrows();
    if cov_grad.ncols() != d || w_star.nrows() < d || w_star.ncols() != w_star.nrows() {
        return Err(invalid_arg("theoretical covariances: shapes do not match"));
    }
    let winv = inverse(w_star)?;
    let omega = spsa_covariance_block(cov_grad, dist);
    let sigma_star = sandwich(&winv, &omega);
    let sigma_op = sandwich(&winv, cov_grad);
    let gap = sym_norm(&(&sigma_star - &sigma_op));
    Ok(TheoreticalCovariances { sigma_star, sigma_op, gap })
}

/// Whether the interval half-width uses the realized final stepsize or the
/// deterministic surrogate `ζα_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalScale {
    #[default]
    RealizedStepsize,
    ZetaAlpha,
}

/// End-of-run inference state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceSnapshot {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Plug-in covariance `Σ_k` of size `(d+m) × (d+m)`.
    pub sigma: DMatrix<f64>,
    /// Stepsize used to scale the intervals.
    pub alpha_scale: f64,
    pub omega: f64,
    pub zeta: f64,
    /// Number of accumulated outer products.
    pub count: u64,
    /// False when `τ` or `ν` changed within the final tenth of the run.
    pub reliable: bool,
}

impl InferenceSnapshot {
    /// Coordinate-wise intervals for the `d` primal and `m` dual entries.
    pub fn intervals(&self, phi: f64) -> Result<Vec<(f64, f64)>> {
        let z = critical_value(phi)?;
        let (d, m) = (self.x.len(), self.lambda.len());
        (0..d + m)
            .map(|i| {
                let c = if i < d { self.x[i] } else { self.lambda[i - d] };
                let h = half_width(self.sigma[(i, i)], self.alpha_scale, self.omega, z)?;
                Ok((c - h, c + h))
            })
            .collect()
    }
}

/// Smallest eigenvalue, used by the PSD checks in tests and diagnostics.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(&symmetrize(a)).first().copied().unwrap_or(0.0)
}
