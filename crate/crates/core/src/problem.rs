//! Problem abstraction, noisy oracles and oracle-call accounting.
//!
//! A [`ProblemInstance`] wraps the deterministic objective `f` and equality
//! constraints `c`, optionally with exact derivatives. Noise is added on top
//! by the `noisy_*` functions following the Gaussian model used in the
//! benchmark experiments: values get `N(0, σ²)`, gradients get
//! `N(0, σ²(I + 11ᵀ))`, and Hessians get entrywise `N(0, σ²)` followed by
//! symmetrization.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::linalg::symmetrize;

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type MatrixListFn = Arc<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

/// Tolerance on the KKT residual of a recorded reference solution.
pub const REFERENCE_KKT_TOL: f64 = 1e-8;

/// Primal-dual pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimalDual {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
}

/// An equality-constrained problem `min f(x) s.t. c(x) = 0`.
///
/// Immutable once built; clones share the underlying closures.
#[derive(Clone)]
pub struct ProblemInstance {
    name: String,
    description: String,
    d: usize,
    m: usize,
    objective: ScalarFn,
    constraints: VectorFn,
    gradient: Option<VectorFn>,
    jacobian: Option<MatrixFn>,
    objective_hessian: Option<MatrixFn>,
    constraint_hessians: Option<MatrixListFn>,
    reference: Option<PrimalDual>,
    initial: PrimalDual,
}

impl fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("m", &self.m)
            .field("reference", &self.reference)
            .field("initial", &self.initial)
            .finish_non_exhaustive()
    }
}

impl ProblemInstance {
    pub fn builder(name: impl Into<String>, d: usize, m: usize) -> ProblemBuilder {
        ProblemBuilder {
            name: name.into(),
            description: String::new(),
            d,
            m,
            objective: None,
            constraints: None,
            gradient: None,
            jacobian: None,
            objective_hessian: None,
            constraint_hessians: None,
            reference_x: None,
            reference_lambda: None,
            x0: None,
            lambda0: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Primal dimension `d`.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of equality constraints `m`.
    pub fn num_constraints(&self) -> usize {
        self.m
    }

    pub fn reference(&self) -> Option<&PrimalDual> {
        self.reference.as_ref()
    }

    pub fn initial(&self) -> &PrimalDual {
        &self.initial
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (self.objective)(x)
    }

    pub fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.constraints)(x)
    }

    pub fn has_derivatives(&self) -> bool {
        self.gradient.is_some() && self.jacobian.is_some()
    }

    pub fn has_hessians(&self) -> bool {
        self.objective_hessian.is_some() && self.constraint_hessians.is_some()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.gradient
            .as_ref()
            .map(|g| g(x))
            .ok_or_else(|| missing(&self.name, "gradient"))
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.jacobian
            .as_ref()
            .map(|g| g(x))
            .ok_or_else(|| missing(&self.name, "jacobian"))
    }

    pub fn objective_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.objective_hessian
            .as_ref()
            .map(|h| h(x))
            .ok_or_else(|| missing(&self.name, "objective hessian"))
    }

    pub fn constraint_hessians(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.constraint_hessians
            .as_ref()
            .map(|h| h(x))
            .ok_or_else(|| missing(&self.name, "constraint hessians"))
    }

    /// Exact Lagrangian Hessian `∇²f + Σ λ_j ∇²c_j`.
    pub fn lagrangian_hessian(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.objective_hessian(x)?;
        for (hj, lj) in self.constraint_hessians(x)?.iter().zip(lambda.iter()) {
            h += hj * *lj;
        }
        Ok(h)
    }

    /// `‖∇f(x) + G(x)ᵀλ‖ + ‖c(x)‖` using exact derivatives.
    pub fn kkt_residual(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
        let g = self.gradient(x)?;
        let jac = self.jacobian(x)?;
        let c = self.constraints(x);
        Ok((g + jac.transpose() * lambda).norm() + c.norm())
    }

    /// Primal-dual distance to the reference solution.
    pub fn primal_dual_error(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> Option<f64> {
        self.reference.as_ref().map(|r| {
            ((x - &r.x).norm_squared() + (lambda - &r.lambda).norm_squared()).sqrt()
        })
    }

    /// Primal distance to the reference solution.
    pub fn primal_error(&self, x: &DVector<f64>) -> Option<f64> {
        self.reference.as_ref().map(|r| (x - &r.x).norm())
    }
}

fn missing(name: &str, what: &str) -> Error {
    Error::MissingCapability(format!("problem `{name}` has no exact {what}"))
}

pub struct ProblemBuilder {
    name: String,
    description: String,
    d: usize,
    m: usize,
    objective: Option<ScalarFn>,
    constraints: Option<VectorFn>,
    gradient: Option<VectorFn>,
    jacobian: Option<MatrixFn>,
    objective_hessian: Option<MatrixFn>,
    constraint_hessians: Option<MatrixListFn>,
    reference_x: Option<DVector<f64>>,
    reference_lambda: Option<DVector<f64>>,
    x0: Option<DVector<f64>>,
    lambda0: Option<DVector<f64>>,
}

impl ProblemBuilder {
    pub fn description(mut self, text: impl Into<String>) -> Self {
        self.description = text.into();
        self
    }

    pub fn objective(mut self, f: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        self.objective = Some(Arc::new(f));
        self
    }

    pub fn constraints(
        mut self,
        c: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.constraints = Some(Arc::new(c));
        self
    }

    pub fn gradient(
        mut self,
        g: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn jacobian(
        mut self,
        j: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(j));
        self
    }

    pub fn hessians(
        mut self,
        objective: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        constraints: impl Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.objective_hessian = Some(Arc::new(objective));
        self.constraint_hessians = Some(Arc::new(constraints));
        self
    }

    pub fn initial_point(mut self, x0: &[f64]) -> Self {
        self.x0 = Some(DVector::from_column_slice(x0));
        self
    }

    pub fn initial_multiplier(mut self, lambda0: &[f64]) -> Self {
        self.lambda0 = Some(DVector::from_column_slice(lambda0));
        self
    }

    /// Reference primal solution. Unless [`reference_multiplier`] is also
    /// given, the multiplier is recovered by least squares at build time.
    ///
    /// [`reference_multiplier`]: ProblemBuilder::reference_multiplier
    pub fn reference_point(mut self, x: &[f64]) -> Self {
        self.reference_x = Some(DVector::from_column_slice(x));
        self
    }

    pub fn reference_multiplier(mut self, lambda: &[f64]) -> Self {
        self.reference_lambda = Some(DVector::from_column_slice(lambda));
        self
    }

    pub fn build(self) -> Result<ProblemInstance> {
        let (d, m) = (self.d, self.m);
        if d == 0 || m == 0 || m >= d {
            return Err(invalid_arg(format!(
                "problem `{}`: need 0 < m < d, got d={d}, m={m}",
                self.name
            )));
        }
        let objective = self
            .objective
            .ok_or_else(|| invalid_arg(format!("problem `{}` has no objective", self.name)))?;
        let constraints = self
            .constraints
            .ok_or_else(|| invalid_arg(format!("problem `{}` has no constraints", self.name)))?;
        let x0 = self.x0.unwrap_or_else(|| DVector::zeros(d));
        let lambda0 = self.lambda0.unwrap_or_else(|| DVector::zeros(m));
        if x0.len() != d || lambda0.len() != m {
            return Err(invalid_arg(format!("problem `{}`: initial point has wrong shape", self.name)));
        }
        let c0 = constraints(&x0);
        if c0.len() != m {
            return Err(invalid_arg(format!(
                "problem `{}`: constraints return {} values, expected {m}",
                self.name,
                c0.len()
            )));
        }
        if let Some(g) = &self.gradient {
            if g(&x0).len() != d {
                return Err(invalid_arg(format!("problem `{}`: gradient has wrong length", self.name)));
            }
        }
        if let Some(j) = &self.jacobian {
            if j(&x0).shape() != (m, d) {
                return Err(invalid_arg(format!("problem `{}`: jacobian has wrong shape", self.name)));
            }
        }

        let mut prob = ProblemInstance {
            name: self.name,
            description: self.description,
            d,
            m,
            objective,
            constraints,
            gradient: self.gradient,
            jacobian: self.jacobian,
            objective_hessian: self.objective_hessian,
            constraint_hessians: self.constraint_hessians,
            reference: None,
            initial: PrimalDual { x: x0, lambda: lambda0 },
        };

        if let Some(xs) = self.reference_x {
            if xs.len() != d {
                return Err(invalid_arg(format!("problem `{}`: reference has wrong length", prob.name)));
            }
            let lambda = match self.reference_lambda {
                Some(l) => l,
                None => least_squares_multiplier(&prob, &xs)?,
            };
            let residual = if prob.has_derivatives() {
                prob.kkt_residual(&xs, &lambda)?
            } else {
                prob.constraints(&xs).norm()
            };
            if !(residual <= REFERENCE_KKT_TOL) {
                return Err(invalid_arg(format!(
                    "problem `{}`: reference solution has KKT residual {residual:e}",
                    prob.name
                )));
            }
            prob.reference = Some(PrimalDual { x: xs, lambda });
        }
        Ok(prob)
    }
}

/// `λ = −(GGᵀ)⁻¹ G ∇f` at `x` using the exact derivatives.
pub fn least_squares_multiplier(prob: &ProblemInstance, x: &DVector<f64>) -> Result<DVector<f64>> {
    let g = prob.gradient(x)?;
    let jac = prob.jacobian(x)?;
    let ggt = &jac * jac.transpose();
    let rhs = -(&jac * g);
    ggt.cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or_else(|| Error::Numerical(format!("problem `{}`: jacobian is rank deficient", prob.name)))
}

/// Gaussian noise applied to the oracles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Variance σ².
    pub sigma2: f64,
    pub value_noise: bool,
    pub gradient_noise: bool,
    pub hessian_noise: bool,
}

impl NoiseModel {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(invalid_arg(format!("noise variance must be finite and >= 0, got {sigma2}")));
        }
        Ok(Self {
            sigma2,
            value_noise: true,
            gradient_noise: true,
            hessian_noise: true,
        })
    }

    pub fn noiseless() -> Self {
        Self {
            sigma2: 0.0,
            value_noise: true,
            gradient_noise: true,
            hessian_noise: true,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// `F(x; ξ) = f(x) + z`, `z ~ N(0, σ²)`. Consumes exactly one normal draw.
pub fn noisy_value<R: Rng + ?Sized>(
    prob: &ProblemInstance,
    x: &DVector<f64>,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<f64> {
    let z: f64 = rng.sample(StandardNormal);
    let fx = prob.objective(x);
    if !fx.is_finite() {
        return Err(Error::DomainViolation(format!(
            "objective of `{}` is not finite at {:?}",
            prob.name(),
            x.as_slice()
        )));
    }
    Ok(if noise.value_noise { fx + noise.sigma() * z } else { fx })
}

/// `∇f(x) + σ(I + 11ᵀ)^{1/2} z`, using the symmetric square root
/// `I + a·11ᵀ` with `a = (√(d+1) − 1)/d`. Consumes `d` normal draws.
pub fn noisy_gradient<R: Rng + ?Sized>(
    prob: &ProblemInstance,
    x: &DVector<f64>,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut g = prob.gradient(x)?;
    let d = g.len();
    let z = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
    if noise.gradient_noise {
        let a = ((d as f64 + 1.0).sqrt() - 1.0) / d as f64;
        let shift = a * z.sum();
        let s = noise.sigma();
        for i in 0..d {
            g[i] += s * (z[i] + shift);
        }
    }
    Ok(g)
}

/// `∇²f(x)` plus i.i.d. `N(0, σ²)` entries, symmetrized as `(H + Hᵀ)/2`.
/// Consumes `d²` normal draws.
pub fn noisy_hessian<R: Rng + ?Sized>(
    prob: &ProblemInstance,
    x: &DVector<f64>,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let mut h = prob.objective_hessian(x)?;
    let d = h.nrows();
    let z = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    if noise.hessian_noise {
        h += z * noise.sigma();
    }
    Ok(symmetrize(&h))
}

/// Per-run oracle-call counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCounts {
    /// Zero-order objective evaluations used by the estimators.
    pub objective: u64,
    /// Zero-order constraint evaluations used by the estimators.
    pub constraint: u64,
    /// Constraint evaluations at the iterate itself (feasibility term of
    /// the Newton system and the merit model).
    pub iterate_constraint: u64,
    pub gradient: u64,
    pub hessian: u64,
}

impl OracleCounts {
    /// Zero-order calls attributed to the derivative estimators.
    pub fn zero_order(&self) -> u64 {
        self.objective + self.constraint
    }
}

/// A problem paired with a noise model and counters; the entry point the
/// solver uses for every oracle access.
pub struct Oracle<'a> {
    prob: &'a ProblemInstance,
    noise: NoiseModel,
    counts: OracleCounts,
}

impl<'a> Oracle<'a> {
    pub fn new(prob: &'a ProblemInstance, noise: NoiseModel) -> Self {
        Self {
            prob,
            noise,
            counts: OracleCounts::default(),
        }
    }

    pub fn problem(&self) -> &'a ProblemInstance {
        self.prob
    }

    pub fn counts(&self) -> OracleCounts {
        self.counts
    }

    pub fn value<R: Rng + ?Sized>(&mut self, x: &DVector<f64>, rng: &mut R) -> Result<f64> {
        self.counts.objective += 1;
        noisy_value(self.prob, x, &self.noise, rng)
    }

    pub fn constraints(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.counts.constraint += 1;
        checked_constraints(self.prob, x)
    }

    pub fn iterate_constraints(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.counts.iterate_constraint += 1;
        checked_constraints(self.prob, x)
    }

    pub fn gradient<R: Rng + ?Sized>(&mut self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        self.counts.gradient += 1;
        noisy_gradient(self.prob, x, &self.noise, rng)
    }

    pub fn hessian<R: Rng + ?Sized>(&mut self, x: &DVector<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
        self.counts.hessian += 1;
        noisy_hessian(self.prob, x, &self.noise, rng)
    }
}

fn checked_constraints(prob: &ProblemInstance, x: &DVector<f64>) -> Result<DVector<f64>> {
    let c = prob.constraints(x);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::DomainViolation(format!(
            "constraints of `{}` are not finite at {:?}",
            prob.name(),
            x.as_slice()
        )));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamPurpose};

    fn paraboloid() -> ProblemInstance {
        ProblemInstance::builder("toy", 2, 1)
            .objective(|x| 0.5 * x.norm_squared())
            .constraints(|x| DVector::from_element(1, x[0] + x[1] - 1.0))
            .gradient(|x| x.clone())
            .jacobian(|_| DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
            .hessians(|_| DMatrix::identity(2, 2), |_| vec![DMatrix::zeros(2, 2)])
            .initial_point(&[0.0, 0.0])
            .reference_point(&[0.5, 0.5])
            .build()
            .unwrap()
    }

    #[test]
    fn reference_multiplier_is_recovered() {
        let p = paraboloid();
        let r = p.reference().unwrap();
        assert!((r.lambda[0] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn bad_reference_is_rejected() {
        let err = ProblemInstance::builder("bad", 2, 1)
            .objective(|x| 0.5 * x.norm_squared())
            .constraints(|x| DVector::from_element(1, x[0] + x[1] - 1.0))
            .gradient(|x| x.clone())
            .jacobian(|_| DMatrix::from_row_slice(1, 2, &[1.0, 1.0]))
            .reference_point(&[1.0, 0.0])
            .build();
        assert!(err.is_err());
    }

    #[test]
    fn wrong_constraint_length_is_rejected() {
        let err = ProblemInstance::builder("bad", 2, 1)
            .objective(|x| x[0])
            .constraints(|x| DVector::from_vec(vec![x[0], x[1]]))
            .build();
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_noise_returns_exact_quantities() {
        let p = paraboloid();
        let noise = NoiseModel::noiseless();
        let mut rng = stream(1, StreamPurpose::SampleNoise);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(noisy_value(&p, &x, &noise, &mut rng).unwrap(), 2.5);
        assert_eq!(noisy_gradient(&p, &x, &noise, &mut rng).unwrap(), x);
        assert_eq!(noisy_hessian(&p, &x, &noise, &mut rng).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn independent_noise_draws_differ() {
        let p = paraboloid();
        let noise = NoiseModel::new(1.0).unwrap();
        let mut rng = stream(3, StreamPurpose::SampleNoise);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let a = noisy_value(&p, &x, &noise, &mut rng).unwrap();
        let b = noisy_value(&p, &x, &noise, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn non_finite_objective_is_a_domain_error() {
        let p = ProblemInstance::builder("log", 2, 1)
            .objective(|x| x[0].ln())
            .constraints(|x| DVector::from_element(1, x[1]))
            .initial_point(&[1.0, 0.0])
            .build()
            .unwrap();
        let mut rng = stream(1, StreamPurpose::SampleNoise);
        let x = DVector::from_vec(vec![-1.0, 0.0]);
        let err = noisy_value(&p, &x, &NoiseModel::noiseless(), &mut rng);
        assert!(matches!(err, Err(Error::DomainViolation(_))));
    }

    #[test]
    fn missing_derivatives_are_capability_errors() {
        let p = ProblemInstance::builder("zero-order", 2, 1)
            .objective(|x| x[0])
            .constraints(|x| DVector::from_element(1, x[1]))
            .build()
            .unwrap();
        let mut rng = stream(1, StreamPurpose::SampleNoise);
        let x = DVector::zeros(2);
        let noise = NoiseModel::noiseless();
        assert!(matches!(noisy_gradient(&p, &x, &noise, &mut rng), Err(Error::MissingCapability(_))));
        assert!(matches!(noisy_hessian(&p, &x, &noise, &mut rng), Err(Error::MissingCapability(_))));
    }

    #[test]
    fn negative_variance_is_rejected() {
        assert!(NoiseModel::new(-1e-3).is_err());
        assert!(NoiseModel::new(f64::NAN).is_err());
    }

    #[test]
    fn gradient_noise_has_the_requested_covariance() {
        // Monte-Carlo check of Cov = σ²(I + 11ᵀ) at d = 3, σ² = 1.
        let p = ProblemInstance::builder("lin3", 3, 1)
            .objective(|x| x.sum())
            .constraints(|x| DVector::from_element(1, x[0]))
            .gradient(|_| DVector::from_element(3, 1.0))
            .jacobian(|_| DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]))
            .build()
            .unwrap();
        let noise = NoiseModel::new(1.0).unwrap();
        let mut rng = stream(11, StreamPurpose::SampleNoise);
        let x = DVector::zeros(3);
        let n = 100_000;
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let e = noisy_gradient(&p, &x, &noise, &mut rng).unwrap() - DVector::from_element(3, 1.0);
            cov += &e * e.transpose();
        }
        cov /= n as f64;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 } else { 1.0 };
                assert!((cov[(i, j)] - want).abs() < 0.1 * want, "cov[{i},{j}] = {}", cov[(i, j)]);
            }
        }
    }
}
