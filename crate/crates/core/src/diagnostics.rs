//! Read-only probes over solver output and estimator-level bias checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::solver::{IterationRecord, RunResult};
use crate::spsa::{sample_direction, spsa_gradient, spsa_hessian, Direction, DirectionDistribution, HessianEvaluations};

/// Largest dimension for which expectations are computed by enumerating
/// all Rademacher directions.
pub const MAX_ENUMERATION_DIM: usize = 16;

/// One row of an estimator-error trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorTracePoint {
    pub k: u64,
    pub gradient: f64,
    pub jacobian: f64,
    pub hessian: f64,
}

/// Errors `‖ḡ_k − ∇f_k‖`, `‖Ḡ_k − G_k‖`, `‖B̄_k − ∇²L_k‖` at each recorded
/// iteration. The run must have been made with estimator tracing on.
pub fn estimator_error_trace(run: &RunResult) -> Result<Vec<EstimatorTracePoint>> {
    run.history
        .iter()
        .map(|r| {
            r.estimator_errors
                .map(|e| EstimatorTracePoint { k: r.k, gradient: e.gradient, jacobian: e.jacobian, hessian: e.hessian })
                .ok_or_else(|| Error::MissingCapability("run was not recorded with estimator tracing".into()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilizationReport {
    pub tau_final: f64,
    pub nu_final: f64,
    pub tau_last_change: u64,
    pub nu_last_change: u64,
    /// No change of either parameter in the second half of the run.
    pub stabilized: bool,
}

/// Scan a recorded history for the last change of `τ` or `ν`. With a
/// thinned history a change is attributed to the first record showing it.
pub fn detect_stabilization(history: &[IterationRecord], max_iters: u64) -> StabilizationReport {
    let mut tau_last = 0;
    let mut nu_last = 0;
    for w in history.windows(2) {
        if w[1].tau != w[0].tau {
            tau_last = w[1].k;
        }
        if w[1].nu != w[0].nu {
            nu_last = w[1].k;
        }
    }
    let last = history.last();
    report(
        last.map_or(f64::NAN, |r| r.tau),
        last.map_or(f64::NAN, |r| r.nu),
        tau_last,
        nu_last,
        max_iters,
    )
}

/// Same report from the exact change trackers kept by the solver.
pub fn run_stabilization(run: &RunResult) -> StabilizationReport {
    report(run.tau, run.nu, run.tau_last_change, run.nu_last_change, run.iterations)
}

fn report(tau: f64, nu: f64, tau_last: u64, nu_last: u64, max_iters: u64) -> StabilizationReport {
    let last = tau_last.max(nu_last);
    StabilizationReport {
        tau_final: tau,
        nu_final: nu,
        tau_last_change: tau_last,
        nu_last_change: nu_last,
        stabilized: last == 0 || 2 * last < max_iters,
    }
}

/// Least-squares line through `(log b, log bias)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// The bias vanished at every grid point, so no slope is defined.
    pub exact: bool,
}

/// Bias magnitudes below this are treated as exactly zero.
pub const EXACT_BIAS_TOL: f64 = 1e-13;

/// Fit the log–log slope of `bias` against `b`.
pub fn bias_slope_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(invalid_arg("bias slope fit needs at least three grid points"));
    }
    if points.iter().any(|&(b, e)| !(b > 0.0) || !b.is_finite() || !e.is_finite()) {
        return Err(invalid_arg("grid points must be positive and finite"));
    }
    let mut bs: Vec<f64> = points.iter().map(|p| p.0).collect();
    bs.sort_by(f64::total_cmp);
    if bs.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid_arg("grid points must be distinct"));
    }
    if points.iter().all(|&(_, e)| e.abs() < EXACT_BIAS_TOL) {
        return Ok(SlopeFit { slope: f64::NAN, intercept: f64::NAN, exact: true });
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|&(b, e)| (b.ln(), e.abs().max(f64::MIN_POSITIVE).ln())).collect();
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(SlopeFit { slope, intercept: my - slope * mx, exact: false })
}

fn check_enumeration(d: usize) -> Result<()> {
    if d == 0 || d > MAX_ENUMERATION_DIM {
        return Err(invalid_arg(format!("enumeration needs 1 <= d <= {MAX_ENUMERATION_DIM}, got {d}")));
    }
    Ok(())
}

/// Exact expectation of the SPSA gradient over all Rademacher directions.
pub fn expected_spsa_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, b: f64) -> Result<DVector<f64>> {
    check_enumeration(x.len())?;
    let dirs = Direction::rademacher_all(x.len());
    let mut acc = DVector::zeros(x.len());
    for dir in &dirs {
        let fp = f(&(x + dir.entries() * b));
        let fm = f(&(x - dir.entries() * b));
        acc += spsa_gradient(fp, fm, b, dir)?;
    }
    Ok(acc / dirs.len() as f64)
}

/// `‖E[ĝ] − ∇f(x)‖`, computed by enumeration.
pub fn gradient_bias_enumerated(
    f: &dyn Fn(&DVector<f64>) -> f64,
    grad: &DVector<f64>,
    x: &DVector<f64>,
    b: f64,
) -> Result<f64> {
    Ok((expected_spsa_gradient(f, x, b)? - grad).norm())
}

/// Monte-Carlo estimate of `‖E[ĝ] − ∇f(x)‖` with the control variate
/// `(Δᵀ∇f)Δ⁻¹ − ∇f`, whose mean is zero, removing the direction-sampling
/// noise that would otherwise swamp an `O(b²)` bias.
pub fn gradient_bias_monte_carlo<R: Rng + ?Sized>(
    f: &dyn Fn(&DVector<f64>) -> f64,
    grad: &DVector<f64>,
    x: &DVector<f64>,
    b: f64,
    dist: &DirectionDistribution,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(invalid_arg("need at least one sample"));
    }
    let d = x.len();
    let mut acc = DVector::zeros(d);
    for _ in 0..samples {
        let dir = sample_direction(dist, d, rng)?;
        let fp = f(&(x + dir.entries() * b));
        let fm = f(&(x - dir.entries() * b));
        let g = spsa_gradient(fp, fm, b, &dir)?;
        let cv = dir.inverse() * dir.entries().dot(grad);
        acc += g - cv;
    }
    Ok((acc / samples as f64).norm())
}

/// Exact expectation of the objective Hessian estimate over all Rademacher
/// pairs `(Δ, Δ̃)`.
pub fn expected_spsa_hessian(
    f: &dyn Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    b: f64,
    b_tilde: f64,
) -> Result<DMatrix<f64>> {
    let d = x.len();
    if 2 * d > MAX_ENUMERATION_DIM {
        return Err(invalid_arg(format!("Hessian enumeration needs 2d <= {MAX_ENUMERATION_DIM}")));
    }
    check_enumeration(d)?;
    let dirs = Direction::rademacher_all(d);
    let empty = DVector::zeros(0);
    let mut acc = DMatrix::zeros(d, d);
    for dir in &dirs {
        let xp = x + dir.entries() * b;
        let xm = x - dir.entries() * b;
        for dt in &dirs {
            let shift = dt.entries() * b_tilde;
            let ev = HessianEvaluations {
                f_plus: f(&xp),
                f_minus: f(&xm),
                f_plus_shift: f(&(&xp + &shift)),
                f_minus_shift: f(&(&xm + &shift)),
                c_plus: empty.clone(),
                c_minus: empty.clone(),
                c_plus_shift: empty.clone(),
                c_minus_shift: empty.clone(),
            };
            acc += spsa_hessian(&ev, b, b_tilde, dir, dt)?.0;
        }
    }
    Ok(acc / (dirs.len() * dirs.len()) as f64)
}
