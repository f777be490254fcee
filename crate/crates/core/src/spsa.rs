//! Simultaneous-perturbation estimators.
//!
//! The estimators consume precomputed zero-order values; evaluating the
//! oracles (and counting the calls) is the solver's job. This keeps the
//! per-iteration budget in one place: 2 objective + 2 constraint calls for
//! the first-order plan, 4 + 4 for the second-order plan.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::linalg::symmetrize;

/// Smallest admissible direction-entry magnitude.
pub const MIN_DIRECTION_ENTRY: f64 = 1e-12;

/// A perturbation direction with all entries nonzero. Stores the entrywise
/// reciprocal alongside the entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    entries: DVector<f64>,
    inverse: DVector<f64>,
}

impl Direction {
    pub fn new(entries: DVector<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid_arg("direction must have at least one entry"));
        }
        if entries.iter().any(|e| !(e.abs() >= MIN_DIRECTION_ENTRY) || !e.is_finite()) {
            return Err(invalid_arg("direction entries must be finite with |Δ_j| >= 1e-12"));
        }
        let inverse = entries.map(|e| 1.0 / e);
        Ok(Self { entries, inverse })
    }

    pub fn from_slice(xs: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(xs))
    }

    pub fn entries(&self) -> &DVector<f64> {
        &self.entries
    }

    /// Entrywise reciprocal `Δ⁻¹`.
    pub fn inverse(&self) -> &DVector<f64> {
        &self.inverse
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    /// All `2^d` Rademacher directions, in binary order (bit set → −1).
    pub fn rademacher_all(d: usize) -> Vec<Direction> {
        (0..1usize << d)
            .map(|mask| {
                let e = DVector::from_fn(d, |j, _| if mask >> j & 1 == 1 { -1.0 } else { 1.0 });
                Direction::new(e).expect("±1 entries")
            })
            .collect()
    }
}

/// Distribution of direction entries. Entries are independent and
/// symmetric about zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DirectionDistribution {
    /// ±1 with probability ½ each.
    #[default]
    Rademacher,
    /// ±level with the level drawn uniformly from `levels`.
    ScaledDiscrete { levels: Vec<f64> },
}

impl DirectionDistribution {
    pub fn validate(&self) -> Result<()> {
        if let DirectionDistribution::ScaledDiscrete { levels } = self {
            if levels.is_empty() || levels.iter().any(|l| !(*l >= MIN_DIRECTION_ENTRY) || !l.is_finite()) {
                return Err(invalid_arg("discrete direction levels must be finite and >= 1e-12"));
            }
        }
        Ok(())
    }

    /// Bounds `(κ_Δ1, κ_Δ2)` on the entry magnitudes.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            DirectionDistribution::Rademacher => (1.0, 1.0),
            DirectionDistribution::ScaledDiscrete { levels } => levels
                .iter()
                .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &l| (lo.min(l), hi.max(l))),
        }
    }
}

/// Draw a direction of dimension `d`.
pub fn sample_direction<R: Rng + ?Sized>(
    dist: &DirectionDistribution,
    d: usize,
    rng: &mut R,
) -> Result<Direction> {
    if d == 0 {
        return Err(invalid_arg("direction dimension must be >= 1"));
    }
    let entries = match dist {
        DirectionDistribution::Rademacher => {
            DVector::from_fn(d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
        }
        DirectionDistribution::ScaledDiscrete { levels } => {
            dist.validate()?;
            DVector::from_fn(d, |_, _| {
                let l = levels[rng.random_range(0..levels.len())];
                if rng.random::<bool>() { l } else { -l }
            })
        }
    };
    Direction::new(entries)
}

fn check_scale(name: &str, b: f64) -> Result<()> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(invalid_arg(format!("{name} must be finite and > 0, got {b}")));
    }
    Ok(())
}

/// `((F₊ − F₋)/(2b)) Δ⁻¹`.
pub fn spsa_gradient(f_plus: f64, f_minus: f64, b: f64, dir: &Direction) -> Result<DVector<f64>> {
    check_scale("b", b)?;
    Ok(dir.inverse() * ((f_plus - f_minus) / (2.0 * b)))
}

/// `((c₊ − c₋)/(2b)) Δ⁻ᵀ`, an `m × d` matrix.
pub fn spsa_jacobian(
    c_plus: &DVector<f64>,
    c_minus: &DVector<f64>,
    b: f64,
    dir: &Direction,
) -> Result<DMatrix<f64>> {
    check_scale("b", b)?;
    if c_plus.len() != c_minus.len() {
        return Err(invalid_arg("constraint evaluations have different lengths"));
    }
    let diff = (c_plus - c_minus) / (2.0 * b);
    Ok(diff * dir.inverse().transpose())
}

/// The eight zero-order values consumed by the Hessian estimator.
#[derive(Clone, Debug)]
pub struct HessianEvaluations {
    /// `F(x + bΔ)`, `F(x − bΔ)`.
    pub f_plus: f64,
    pub f_minus: f64,
    /// `F(x + bΔ + b̃Δ̃)`, `F(x − bΔ + b̃Δ̃)`.
    pub f_plus_shift: f64,
    pub f_minus_shift: f64,
    pub c_plus: DVector<f64>,
    pub c_minus: DVector<f64>,
    pub c_plus_shift: DVector<f64>,
    pub c_minus_shift: DVector<f64>,
}

/// Symmetrized `½[(δ/(2b))Δ⁻ᵀ + Δ⁻¹(δ/(2b))ᵀ]`.
fn outer_sym(delta: &DVector<f64>, b: f64, dir: &Direction) -> DMatrix<f64> {
    let m = (delta / (2.0 * b)) * dir.inverse().transpose();
    symmetrize(&m)
}

/// Objective and constraint Hessian estimates from one-sided gradients at
/// `x ± bΔ` along the second direction `Δ̃`. Every output is exactly
/// symmetric.
pub fn spsa_hessian(
    ev: &HessianEvaluations,
    b: f64,
    b_tilde: f64,
    dir: &Direction,
    dir_tilde: &Direction,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    check_scale("b", b)?;
    check_scale("b_tilde", b_tilde)?;
    if dir.dim() != dir_tilde.dim() {
        return Err(invalid_arg("directions have different dimensions"));
    }
    let m = ev.c_plus.len();
    if ev.c_minus.len() != m || ev.c_plus_shift.len() != m || ev.c_minus_shift.len() != m {
        return Err(invalid_arg("constraint evaluations have different lengths"));
    }
    let inv_t = dir_tilde.inverse();
    // δ∇̃F = ∇̃F(x+bΔ) − ∇̃F(x−bΔ); the common Δ̃⁻¹ factor is pulled out.
    let df = ((ev.f_plus_shift - ev.f_plus) - (ev.f_minus_shift - ev.f_minus)) / b_tilde;
    let h_f = outer_sym(&(inv_t * df), b, dir);
    let h_c = (0..m)
        .map(|j| {
            let dc = ((ev.c_plus_shift[j] - ev.c_plus[j]) - (ev.c_minus_shift[j] - ev.c_minus[j])) / b_tilde;
            outer_sym(&(inv_t * dc), b, dir)
        })
        .collect();
    Ok((h_f, h_c))
}

/// Estimator order: gradient/Jacobian only, or also Hessians.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorOrder {
    First,
    Second,
}

/// Which oracle a planned evaluation calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    Objective,
    Constraint,
}

/// Zero-order evaluation points of one iteration.
#[derive(Clone, Debug)]
pub struct EvaluationPlan {
    pub points: Vec<(OracleKind, DVector<f64>)>,
}

impl EvaluationPlan {
    pub fn objective_calls(&self) -> usize {
        self.points.iter().filter(|(k, _)| *k == OracleKind::Objective).count()
    }

    pub fn constraint_calls(&self) -> usize {
        self.points.iter().filter(|(k, _)| *k == OracleKind::Constraint).count()
    }

    pub fn total(&self) -> usize {
        self.points.len()
    }
}

/// Number of zero-order calls per iteration as `(objective, constraint)`.
pub fn plan_counts(order: EstimatorOrder) -> (usize, usize) {
    match order {
        EstimatorOrder::First => (2, 2),
        EstimatorOrder::Second => (4, 4),
    }
}

/// Points `x ± bΔ` and, for the second-order plan, `x ± bΔ + b̃Δ̃`, each
/// queried on both the objective and the constraints.
pub fn oracle_evaluation_plan(
    order: EstimatorOrder,
    x: &DVector<f64>,
    b: f64,
    b_tilde: f64,
    dir: &Direction,
    dir_tilde: Option<&Direction>,
) -> Result<EvaluationPlan> {
    let plus = x + dir.entries() * b;
    let minus = x - dir.entries() * b;
    let mut pts = vec![plus.clone(), minus.clone()];
    if order == EstimatorOrder::Second {
        let t = dir_tilde.ok_or_else(|| invalid_arg("second-order plan needs a second direction"))?;
        let shift = t.entries() * b_tilde;
        pts.push(&plus + &shift);
        pts.push(&minus + &shift);
    }
    let mut points = Vec::with_capacity(2 * pts.len());
    for p in pts {
        points.push((OracleKind::Objective, p.clone()));
        points.push((OracleKind::Constraint, p));
    }
    Ok(EvaluationPlan { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamPurpose};

    #[test]
    fn rademacher_entries_have_unit_magnitude() {
        let mut rng = stream(5, StreamPurpose::Direction);
        for _ in 0..100 {
            let d = sample_direction(&DirectionDistribution::Rademacher, 3, &mut rng).unwrap();
            assert!(d.entries().iter().all(|e| e.abs() == 1.0));
        }
    }

    #[test]
    fn rademacher_entry_mean_is_near_zero() {
        let mut rng = stream(6, StreamPurpose::Direction);
        let n = 100_000;
        let mut sum = DVector::<f64>::zeros(2);
        for _ in 0..n {
            sum += sample_direction(&DirectionDistribution::Rademacher, 2, &mut rng).unwrap().entries();
        }
        assert!((sum / n as f64).amax() < 0.02);
    }

    #[test]
    fn scaled_discrete_respects_bounds() {
        let dist = DirectionDistribution::ScaledDiscrete { levels: vec![0.5, 2.0] };
        assert_eq!(dist.bounds(), (0.5, 2.0));
        let mut rng = stream(1, StreamPurpose::Direction);
        for _ in 0..100 {
            let d = sample_direction(&dist, 4, &mut rng).unwrap();
            assert!(d.entries().iter().all(|e| e.abs() == 0.5 || e.abs() == 2.0));
        }
    }

    #[test]
    fn zero_entry_is_rejected() {
        assert!(Direction::from_slice(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_is_exact_on_linear() {
        let dir = Direction::from_slice(&[1.0, -1.0]).unwrap();
        let b = 0.1;
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let fp = x[0] + b * dir.entries()[0];
        let fm = x[0] - b * dir.entries()[0];
        let g = spsa_gradient(fp, fm, b, &dir).unwrap();
        assert!((g - DVector::from_vec(vec![1.0, -1.0])).norm() < 1e-12);
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let dir = Direction::from_slice(&[1.0]).unwrap();
        assert!(spsa_gradient(1.0, 0.0, 0.0, &dir).is_err());
        assert!(spsa_gradient(1.0, 0.0, -1.0, &dir).is_err());
    }

    #[test]
    fn jacobian_of_constant_is_zero() {
        let dir = Direction::from_slice(&[1.0, 1.0]).unwrap();
        let c = DVector::from_vec(vec![3.0]);
        assert_eq!(spsa_jacobian(&c, &c, 0.5, &dir).unwrap(), DMatrix::zeros(1, 2));
    }

    #[test]
    fn plan_sizes_do_not_depend_on_dimension() {
        for d in [2, 50] {
            let x = DVector::zeros(d);
            let dir = Direction::new(DVector::from_element(d, 1.0)).unwrap();
            let first = oracle_evaluation_plan(EstimatorOrder::First, &x, 0.1, 0.1, &dir, None).unwrap();
            let second =
                oracle_evaluation_plan(EstimatorOrder::Second, &x, 0.1, 0.1, &dir, Some(&dir)).unwrap();
            assert_eq!(first.total(), 4);
            assert_eq!(second.total(), 8);
            assert_eq!((second.objective_calls(), second.constraint_calls()), (4, 4));
        }
    }
}
