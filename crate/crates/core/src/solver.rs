//! The main iteration: derivative-free SQP with SPSA estimates, plus the
//! derivative-based baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::debias::{lagrangian_hessian_estimate, schedule_eval, EstimatorState, ScheduleSet};
use crate::error::{Error, Result};
use crate::inference::{
    omega_scaling, plugin_covariance, CovarianceEstimate, InferenceSnapshot, IntervalScale,
};
use crate::problem::{NoiseModel, Oracle, OracleCounts, ProblemInstance};
use crate::regularization::{regularize_hessian, regularize_jacobian, RegularizationBounds};
use crate::rng::RunStreams;
use crate::spsa::{
    plan_counts, sample_direction, spsa_gradient, spsa_hessian, spsa_jacobian, DirectionDistribution,
    EstimatorOrder, HessianEvaluations,
};
use crate::sqp::{
    kkt_matrix, model_reduction, model_reduction_scale, select_stepsize, solve_kkt, update_nu, update_tau, SqpParameters};

/// Iterates whose norm exceeds this abort the run.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// Fraction of the run at the end during which a change of `τ` or `ν`
/// marks the inference snapshot as unreliable.
pub const RELIABILITY_TAIL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DfFirst,
    DfSecond,
    DbFirst,
    DbSecond,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DfFirst, Method::DfSecond, Method::DbFirst, Method::DbSecond];

    pub fn order(self) -> EstimatorOrder {
        match self {
            Method::DfFirst | Method::DbFirst => EstimatorOrder::First,
            Method::DfSecond | Method::DbSecond => EstimatorOrder::Second,
        }
    }

    pub fn derivative_free(self) -> bool {
        matches!(self, Method::DfFirst | Method::DfSecond)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DfFirst => "df-first",
            Method::DfSecond => "df-second",
            Method::DbFirst => "db-first",
            Method::DbSecond => "db-second",
        }
    }

    /// Zero-order calls per iteration charged to the estimators.
    pub fn zero_order_budget(self) -> u64 {
        if self.derivative_free() {
            let (f, c) = plan_counts(self.order());
            (f + c) as u64
        } else {
            0
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Inference-layer switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub enabled: bool,
    /// Start the outer-product average after the burn-in period instead of
    /// at the first iteration.
    pub accumulate_after_burn_in: bool,
    pub interval_scale: IntervalScale,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            accumulate_after_burn_in: false,
            interval_scale: IntervalScale::RealizedStepsize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub schedules: ScheduleSet,
    pub params: SqpParameters,
    pub noise: NoiseModel,
    pub bounds: RegularizationBounds,
    pub direction: DirectionDistribution,
    pub max_iters: u64,
    pub burn_in_fraction: f64,
    pub seed: u64,
    /// History stride; `None` picks `max(1, max_iters / 1000)`.
    pub record_every: Option<u64>,
    pub inference: InferenceOptions,
    /// Keep the iterate fixed and only run the estimators.
    pub frozen_iterate: bool,
    /// Record estimator errors against exact derivatives.
    pub trace_estimators: bool,
    /// Measure wall time.
    pub timing: bool,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            schedules: ScheduleSet::default(),
            params: SqpParameters::default(),
            noise: NoiseModel::noiseless(),
            bounds: RegularizationBounds::default(),
            direction: DirectionDistribution::Rademacher,
            max_iters: 100_000,
            burn_in_fraction: 0.2,
            seed: 0,
            record_every: None,
            inference: InferenceOptions::default(),
            frozen_iterate: false,
            trace_estimators: false,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedules.validate()?;
        self.params.validate()?;
        self.bounds.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        self.direction.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::InvalidConfig(format!(
                "burn-in fraction must be in [0, 1), got {}",
                self.burn_in_fraction
            )));
        }
        if self.record_every == Some(0) {
            return Err(Error::InvalidConfig("record_every must be >= 1".into()));
        }
        if !(self.noise.sigma2 >= 0.0) {
            return Err(Error::InvalidConfig("noise variance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> u64 {
        self.record_every.unwrap_or((self.max_iters / 1000).max(1))
    }

    pub fn burn_in_iters(&self) -> u64 {
        (self.burn_in_fraction * self.max_iters as f64).floor() as u64
    }
}

/// Errors of the debiased estimates against the exact derivatives at `x_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorErrors {
    pub gradient: f64,
    pub jacobian: f64,
    pub hessian: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: u64,
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub alpha_bar: f64,
    pub tau: f64,
    pub nu: f64,
    pub delta_q: f64,
    /// `‖∇f + Gᵀλ_k‖ + ‖c‖` with exact derivatives at `(x_k, λ_k)`.
    pub kkt_residual: Option<f64>,
    /// Cumulative counters after this iteration.
    pub counts: OracleCounts,
    pub flops: f64,
    pub jacobian_regularized: bool,
    pub hessian_regularized: bool,
    pub estimator_errors: Option<EstimatorErrors>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Aborted { iteration: u64, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub problem: String,
    pub method: Method,
    pub seed: u64,
    pub status: RunStatus,
    /// Iterations actually performed.
    pub iterations: u64,
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub history: Vec<IterationRecord>,
    /// Mean of the iterates after burn-in.
    pub x_avg: Option<DVector<f64>>,
    pub tau: f64,
    pub nu: f64,
    /// Last iteration at which `τ` (resp. `ν`) changed; 0 when it never did.
    pub tau_last_change: u64,
    pub nu_last_change: u64,
    pub counts: OracleCounts,
    /// Smallest and largest per-iteration zero-order call counts.
    pub zero_order_per_iter: Option<(u64, u64)>,
    pub flops_per_iter: f64,
    pub final_kkt_residual: Option<f64>,
    pub primal_error: Option<f64>,
    pub primal_dual_error: Option<f64>,
    pub inference: Option<InferenceSnapshot>,
    pub wall_ms: Option<f64>,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Per-iteration flop model, with `n = d + m`:
/// df-first `n³ + 0.8dn`, df-second `n³ + 1.6dn + 0.6d² + 0.8d²m`,
/// db-first `n³ + dn`, db-second `n³ + dn + 3d²`.
pub fn flop_estimate_model(d: usize, m: usize, method: Method) -> f64 {
    let (d, m) = (d as f64, m as f64);
    let n = d + m;
    let base = n * n * n;
    match method {
        Method::DfFirst => base + 0.8 * d * n,
        Method::DfSecond => base + 1.6 * d * n + 0.6 * d * d + 0.8 * d * d * m,
        Method::DbFirst => base + d * n,
        Method::DbSecond => base + d * n + 3.0 * d * d,
    }
}

struct Estimates {
    g_hat: DVector<f64>,
    jac_hat: DMatrix<f64>,
    hess_hat: Option<DMatrix<f64>>,
}

fn estimate(
    oracle: &mut Oracle<'_>,
    cfg: &SolverConfig,
    streams: &mut RunStreams,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    b: f64,
    b_tilde: f64,
) -> Result<Estimates> {
    let prob = oracle.problem();
    let second = cfg.method.order() == EstimatorOrder::Second;
    if cfg.method.derivative_free() {
        let d = prob.dim();
        let dir = sample_direction(&cfg.direction, d, &mut streams.direction)?;
        let x_plus = x + dir.entries() * b;
        let x_minus = x - dir.entries() * b;
        let f_plus = oracle.value(&x_plus, &mut streams.noise)?;
        let c_plus = oracle.constraints(&x_plus)?;
        let f_minus = oracle.value(&x_minus, &mut streams.noise)?;
        let c_minus = oracle.constraints(&x_minus)?;
        let g_hat = spsa_gradient(f_plus, f_minus, b, &dir)?;
        let jac_hat = spsa_jacobian(&c_plus, &c_minus, b, &dir)?;
        let hess_hat = if second {
            let dir_t = sample_direction(&cfg.direction, d, &mut streams.second_direction)?;
            let shift = dir_t.entries() * b_tilde;
            let xp = &x_plus + &shift;
            let xm = &x_minus + &shift;
            let f_plus_shift = oracle.value(&xp, &mut streams.noise)?;
            let c_plus_shift = oracle.constraints(&xp)?;
            let f_minus_shift = oracle.value(&xm, &mut streams.noise)?;
            let c_minus_shift = oracle.constraints(&xm)?;
            let ev = HessianEvaluations {
                f_plus,
                f_minus,
                f_plus_shift,
                f_minus_shift,
                c_plus,
                c_minus,
                c_plus_shift,
                c_minus_shift,
            };
            let (h_f, h_c) = spsa_hessian(&ev, b, b_tilde, &dir, &dir_t)?;
            Some(lagrangian_hessian_estimate(&h_f, &h_c, lambda)?)
        } else {
            None
        };
        Ok(Estimates { g_hat, jac_hat, hess_hat })
    } else {
        let g_hat = oracle.gradient(x, &mut streams.noise)?;
        let jac_hat = prob.jacobian(x)?;
        let hess_hat = if second {
            let h_f = oracle.hessian(x, &mut streams.noise)?;
            let h_c = prob.constraint_hessians(x)?;
            Some(lagrangian_hessian_estimate(&h_f, &h_c, lambda)?)
        } else {
            None
        };
        Ok(Estimates { g_hat, jac_hat, hess_hat })
    }
}

fn estimator_errors(
    prob: &ProblemInstance,
    state: &EstimatorState,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<EstimatorErrors> {
    let g = prob.gradient(x)?;
    let jac = prob.jacobian(x)?;
    let h = prob.lagrangian_hessian(x, lambda)?;
    Ok(EstimatorErrors {
        gradient: (&state.g_bar - g).norm(),
        jacobian: (&state.jac_bar - jac).norm(),
        hessian: (&state.hess_bar - h).norm(),
    })
}

/// Run the configured method on `prob`. Numerical failures during the run
/// end it early with [`RunStatus::Aborted`]; configuration and capability
/// problems are returned as errors.
pub fn run(prob: &ProblemInstance, cfg: &SolverConfig) -> Result<RunResult> {
    cfg.validate()?;
    if !cfg.method.derivative_free() && !prob.has_derivatives() {
        return Err(Error::MissingCapability(format!(
            "{} needs exact derivatives, which `{}` does not provide",
            cfg.method,
            prob.name()
        )));
    }
    if cfg.method == Method::DbSecond && !prob.has_hessians() {
        return Err(Error::MissingCapability(format!("`{}` has no exact Hessians", prob.name())));
    }
    if cfg.trace_estimators && !(prob.has_derivatives() && prob.has_hessians()) {
        return Err(Error::MissingCapability(format!(
            "estimator tracing needs exact derivatives of `{}`",
            prob.name()
        )));
    }
    let start = cfg.timing.then(Instant::now);
    let (d, m) = (prob.dim(), prob.num_constraints());
    let mut oracle = Oracle::new(prob, cfg.noise);
    let mut streams = RunStreams::new(cfg.seed);
    let mut state = EstimatorState::new(d, m);
    let mut x = prob.initial().x.clone();
    let mut lambda = prob.initial().lambda.clone();
    let mut tau = cfg.params.tau_init;
    let mut nu = cfg.params.nu_init;
    let (mut tau_last, mut nu_last) = (0u64, 0u64);
    let stride = cfg.stride();
    let burn_in = cfg.burn_in_iters();
    let flops_per_iter = flop_estimate_model(d, m, cfg.method);
    let first_order = cfg.method.order() == EstimatorOrder::First;
    let identity = DMatrix::<f64>::identity(d, d);
    let mut cov = CovarianceEstimate::new(d);
    let cov_start = if cfg.inference.accumulate_after_burn_in { burn_in } else { 0 };
    let mut history = Vec::with_capacity((cfg.max_iters / stride + 1) as usize);
    let mut x_sum = DVector::<f64>::zeros(d);
    let mut n_avg = 0u64;
    let mut zero_order_range: Option<(u64, u64)> = None;
    let mut last_w: Option<DMatrix<f64>> = None;
    let mut last_alpha_bar = f64::NAN;
    let mut last_alpha = f64::NAN;
    let mut status = RunStatus::Completed;
    let mut iterations = 0u64;

    for k in 0..cfg.max_iters {
        let sv = schedule_eval(&cfg.schedules, k);
        let beta = if cfg.method.derivative_free() { sv.beta } else { 1.0 };
        let before = oracle.counts().zero_order();

        let step: Result<_> = (|| {
            let c_k = oracle.iterate_constraints(&x)?;
            let est = estimate(&mut oracle, cfg, &mut streams, &x, &lambda, sv.b, sv.b_tilde)?;
            state.update_first_order(&est.g_hat, &est.jac_hat, beta);
            if let Some(h) = &est.hess_hat {
                state.update_hessian(h, beta);
            }
            let jr = regularize_jacobian(&state.jac_bar, &cfg.bounds);
            let (b_tilde, hess_active) = if first_order {
                (identity.clone(), false)
            } else {
                let hr = regularize_hessian(&state.hess_bar, &jr.g_tilde, &cfg.bounds);
                (hr.b_tilde, hr.active)
            };
            let grad_l = &state.g_bar + jr.g_tilde.tr_mul(&lambda);
            let kkt = solve_kkt(&b_tilde, &jr.g_tilde, &grad_l, &c_k)?;
            let c_norm = c_k.norm();
            let new_tau = update_tau(tau, &state.g_bar, &kkt.dx, &b_tilde, c_norm, cfg.params.sigma, cfg.params.epsilon);
            let dq = model_reduction(&kkt.dx, new_tau, &state.g_bar, &b_tilde, c_norm);
            let dq_scale = model_reduction_scale(&kkt.dx, new_tau, &state.g_bar, &b_tilde, c_norm);
            let new_nu = update_nu(nu, dq, dq_scale, &kkt.dx, cfg.params.epsilon);
            let alpha_bar = select_stepsize(&cfg.params, sv.alpha, new_tau, new_nu, &mut streams.stepsize);
            Ok((est, jr.g_tilde, jr.active, b_tilde, hess_active, kkt, new_tau, new_nu, dq, alpha_bar))
        })();

        let (est, g_tilde, jac_active, b_tilde, hess_active, kkt, new_tau, new_nu, dq, alpha_bar) = match step {
            Ok(v) => v,
            Err(e @ (Error::Numerical(_) | Error::DomainViolation(_))) => {
                status = RunStatus::Aborted { iteration: k, reason: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };

        if new_tau != tau {
            tau_last = k;
        }
        if new_nu != nu {
            nu_last = k;
        }
        tau = new_tau;
        nu = new_nu;

        if cfg.inference.enabled && k >= cov_start {
            let v = &est.g_hat + est.jac_hat.tr_mul(&lambda);
            cov.push(&v);
        }

        let per_iter = oracle.counts().zero_order() - before;
        zero_order_range = Some(match zero_order_range {
            None => (per_iter, per_iter),
            Some((lo, hi)) => (lo.min(per_iter), hi.max(per_iter)),
        });

        if k % stride == 0 {
            let kkt_residual = if prob.has_derivatives() { prob.kkt_residual(&x, &lambda).ok() } else { None };
            let estimator_errors = if cfg.trace_estimators {
                Some(estimator_errors(prob, &state, &x, &lambda)?)
            } else {
                None
            };
            history.push(IterationRecord {
                k,
                x: x.clone(),
                lambda: lambda.clone(),
                alpha_bar,
                tau,
                nu,
                delta_q: dq,
                kkt_residual,
                counts: oracle.counts(),
                flops: flops_per_iter * (k + 1) as f64,
                jacobian_regularized: jac_active,
                hessian_regularized: hess_active,
                estimator_errors,
            });
        }

        if !cfg.frozen_iterate {
            x.axpy(alpha_bar, &kkt.dx, 1.0);
            lambda.axpy(alpha_bar, &kkt.dlambda, 1.0);
        }
        iterations = k + 1;
        last_alpha_bar = alpha_bar;
        last_alpha = sv.alpha;
        if cfg.inference.enabled {
            last_w = Some(kkt_matrix(&b_tilde, &g_tilde));
        }

        if k >= burn_in {
            x_sum += &x;
            n_avg += 1;
        }

        if x.iter().chain(lambda.iter()).any(|v| !v.is_finite()) {
            status = RunStatus::Aborted { iteration: k, reason: "non-finite iterate".into() };
            break;
        }
        if x.norm() > DIVERGENCE_BOUND {
            status = RunStatus::Aborted {
                iteration: k,
                reason: format!("iterate norm exceeded {DIVERGENCE_BOUND:e}"),
            };
            break;
        }
    }

    let completed = status == RunStatus::Completed;
    let inference = if cfg.inference.enabled && completed && cov.count > 0 {
        match last_w.as_ref().map(|w| plugin_covariance(&cov, w)) {
            Some(Ok(sigma)) => {
                let zeta = nu / (tau * cfg.params.kappa_grad_f + cfg.params.kappa_grad_c);
                let omega = omega_scaling(cfg.schedules.alpha.exponent, zeta, cfg.schedules.alpha.coef)?;
                let alpha_scale = match cfg.inference.interval_scale {
                    IntervalScale::RealizedStepsize => last_alpha_bar,
                    IntervalScale::ZetaAlpha => zeta * last_alpha,
                };
                let tail_start = ((1.0 - RELIABILITY_TAIL) * iterations as f64).floor() as u64;
                let reliable = tau_last.max(nu_last) < tail_start || (tau_last == 0 && nu_last == 0);
                Some(InferenceSnapshot {
                    x: x.clone(),
                    lambda: lambda.clone(),
                    sigma,
                    alpha_scale,
                    omega,
                    zeta,
                    count: cov.count,
                    reliable,
                })
            }
            _ => None,
        }
    } else {
        None
    };

    let final_kkt_residual = if prob.has_derivatives() && x.iter().all(|v| v.is_finite()) {
        prob.kkt_residual(&x, &lambda).ok()
    } else {
        None
    };
    Ok(RunResult {
        problem: prob.name().to_string(),
        method: cfg.method,
        seed: cfg.seed,
        status,
        iterations,
        primal_error: prob.primal_error(&x),
        primal_dual_error: prob.primal_dual_error(&x, &lambda),
        x_avg: (n_avg > 0).then(|| x_sum / n_avg as f64),
        x,
        lambda,
        history,
        tau,
        nu,
        tau_last_change: tau_last,
        nu_last_change: nu_last,
        counts: oracle.counts(),
        zero_order_per_iter: zero_order_range,
        flops_per_iter,
        final_kkt_residual,
        inference,
        wall_ms: start.map(|s| s.elapsed().as_secs_f64() * 1e3),
    })
}

/// Outcome of checking per-iteration zero-order call counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub expected_per_iter: u64,
    pub observed_min: u64,
    pub observed_max: u64,
    /// Recorded iterations whose delta differs from the expectation.
    pub offending: Vec<u64>,
}

/// Verify that every iteration used exactly the planned number of
/// zero-order calls: 4 for df-first, 8 for df-second, 0 for db-*.
pub fn oracle_call_audit(result: &RunResult, cfg: &SolverConfig) -> Result<AuditReport> {
    let expected = cfg.method.zero_order_budget();
    let (lo, hi) = result.zero_order_per_iter.unwrap_or((expected, expected));
    let mut offending = Vec::new();
    let mut prev: Option<&IterationRecord> = None;
    for rec in &result.history {
        let delta = match prev {
            Some(p) if rec.k == p.k + 1 => rec.counts.zero_order() - p.counts.zero_order(),
            Some(_) => {
                prev = Some(rec);
                continue;
            }
            None if rec.k == 0 => rec.counts.zero_order(),
            None => {
                prev = Some(rec);
                continue;
            }
        };
        if delta != expected {
            offending.push(rec.k);
        }
        prev = Some(rec);
    }
    let report = AuditReport { expected_per_iter: expected, observed_min: lo, observed_max: hi, offending };
    let total_ok = result.counts.zero_order() == expected * result.iterations;
    if lo != expected || hi != expected || !report.offending.is_empty() || !total_ok {
        return Err(Error::Audit(format!(
            "{}: expected {expected} zero-order calls per iteration, observed range [{lo}, {hi}], offending iterations {:?}",
            cfg.method, report.offending
        )));
    }
    Ok(report)
}
