//! Momentum averaging of the derivative estimates and the schedules that
//! drive it.

use nalgebra::allocator::Allocator;
use nalgebra::{DMatrix, DVector, DefaultAllocator, Dim, OMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::linalg::symmetrize;

/// `(1 − β)·prev + β·raw`.
pub fn update_average<R: Dim, C: Dim>(
    prev: &OMatrix<f64, R, C>,
    raw: &OMatrix<f64, R, C>,
    beta: f64,
) -> Result<OMatrix<f64, R, C>>
where
    DefaultAllocator: Allocator<R, C>,
{
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid_arg(format!("averaging weight must lie in [0, 1], got {beta}")));
    }
    if prev.shape() != raw.shape() {
        return Err(invalid_arg("averaged quantities have different shapes"));
    }
    Ok(prev * (1.0 - beta) + raw * beta)
}

/// In-place variant used on the hot path; `β` is assumed valid.
pub(crate) fn blend_into<R: Dim, C: Dim>(acc: &mut OMatrix<f64, R, C>, raw: &OMatrix<f64, R, C>, beta: f64)
where
    DefaultAllocator: Allocator<R, C>,
{
    acc.zip_apply(raw, |a, r| *a = (1.0 - beta) * *a + beta * r);
}

/// `H_f + Σ_j λ_j H_c[j]`.
pub fn lagrangian_hessian_estimate(
    h_f: &DMatrix<f64>,
    h_c: &[DMatrix<f64>],
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if h_c.len() != lambda.len() {
        return Err(invalid_arg(format!(
            "{} constraint Hessians but {} multipliers",
            h_c.len(),
            lambda.len()
        )));
    }
    let mut h = h_f.clone();
    for (hj, lj) in h_c.iter().zip(lambda.iter()) {
        if hj.shape() != h.shape() {
            return Err(invalid_arg("constraint Hessian has wrong shape"));
        }
        h += hj * *lj;
    }
    Ok(symmetrize(&h))
}

/// `ι/(k+1)^p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSchedule {
    pub coef: f64,
    pub exponent: f64,
}

impl PowerSchedule {
    pub const fn new(coef: f64, exponent: f64) -> Self {
        Self { coef, exponent }
    }

    pub fn at(&self, k: u64) -> f64 {
        self.coef / ((k + 1) as f64).powf(self.exponent)
    }
}

/// Stepsize, averaging and perturbation schedules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSet {
    pub alpha: PowerSchedule,
    pub beta: PowerSchedule,
    pub b: PowerSchedule,
    pub b_tilde: PowerSchedule,
}

impl Default for ScheduleSet {
    fn default() -> Self {
        Self {
            alpha: PowerSchedule::new(1.0, 0.751),
            beta: PowerSchedule::new(1.0, 0.501),
            b: PowerSchedule::new(1.0, 0.25),
            b_tilde: PowerSchedule::new(1.0, 0.25),
        }
    }
}

/// Schedule values at one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub beta: f64,
    pub b: f64,
    pub b_tilde: f64,
}

/// Evaluate every schedule at iteration `k` (so at `t = k + 1`). `β` is
/// clamped to 1.
pub fn schedule_eval(s: &ScheduleSet, k: u64) -> ScheduleValues {
    ScheduleValues {
        alpha: s.alpha.at(k),
        beta: s.beta.at(k).min(1.0),
        b: s.b.at(k),
        b_tilde: s.b_tilde.at(k),
    }
}

impl ScheduleSet {
    /// Positivity of every coefficient and exponent.
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("alpha", self.alpha), ("beta", self.beta), ("b", self.b), ("b_tilde", self.b_tilde)] {
            if !(s.coef > 0.0 && s.exponent > 0.0) || !s.coef.is_finite() || !s.exponent.is_finite() {
                return Err(Error::InvalidConfig(format!("schedule `{name}` needs positive coefficient and exponent")));
            }
        }
        Ok(())
    }

    /// Exponent conditions for global convergence:
    /// `p₁ ∈ (0.75, 1]`, `p₂ ∈ (0.5, 2p₁ − 1)`, `p₃ > 0.5 − 0.5p₂`.
    pub fn validate_global(&self) -> Result<()> {
        let (p1, p2, p3) = (self.alpha.exponent, self.beta.exponent, self.b.exponent);
        let mut bad = Vec::new();
        if !(p1 > 0.75 && p1 <= 1.0) {
            bad.push(format!("p1 = {p1} not in (0.75, 1]"));
        }
        if !(p2 > 0.5 && p2 < 2.0 * p1 - 1.0) {
            bad.push(format!("p2 = {p2} not in (0.5, 2p1 - 1)"));
        }
        if !(p3 > 0.5 - 0.5 * p2) {
            bad.push(format!("p3 = {p3} <= 0.5 - 0.5 p2"));
        }
        collect(bad)
    }

    /// Exponent conditions for asymptotic normality, given the adaptivity
    /// exponent `p` of the stepsize interval.
    pub fn validate_inference(&self, p: f64) -> Result<()> {
        let (p1, p2, p3, p4) = (self.alpha.exponent, self.beta.exponent, self.b.exponent, self.b_tilde.exponent);
        let mut bad = Vec::new();
        if !(p1 > 0.5 && p1 <= 1.0) {
            bad.push(format!("p1 = {p1} not in (0.5, 1]"));
        }
        if !(p2 > 0.5 && p2 < p1) {
            bad.push(format!("p2 = {p2} not in (0.5, p1)"));
        }
        if !(p3 > (0.5 - 0.5 * p2).max(0.25 * p1)) {
            bad.push(format!("p3 = {p3} <= max(0.5 - 0.5 p2, 0.25 p1)"));
        }
        if !(p4 > 0.5 * p3 + 0.25 * (p1 - p2)) {
            bad.push(format!("p4 = {p4} <= 0.5 p3 + 0.25 (p1 - p2)"));
        }
        if !(p > 1.5 - 0.5 * p2 / p1) {
            bad.push(format!("p = {p} <= 1.5 - 0.5 p2 / p1"));
        }
        collect(bad)
    }
}

fn collect(bad: Vec<String>) -> Result<()> {
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(bad.join("; ")))
    }
}

/// Running debiased gradient, Jacobian and Lagrangian Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub g_bar: DVector<f64>,
    pub jac_bar: DMatrix<f64>,
    pub hess_bar: DMatrix<f64>,
    /// Number of gradient updates applied.
    pub k: u64,
}

impl EstimatorState {
    /// `ḡ = 0`, `Ḡ = 0`, `B̄ = I`.
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            g_bar: DVector::zeros(d),
            jac_bar: DMatrix::zeros(m, d),
            hess_bar: DMatrix::identity(d, d),
            k: 0,
        }
    }

    pub fn update_first_order(&mut self, g_hat: &DVector<f64>, jac_hat: &DMatrix<f64>, beta: f64) {
        blend_into(&mut self.g_bar, g_hat, beta);
        blend_into(&mut self.jac_bar, jac_hat, beta);
        self.k += 1;
    }

    /// `hess_hat` must be symmetric; the average then stays symmetric.
    pub fn update_hessian(&mut self, hess_hat: &DMatrix<f64>, beta: f64) {
        blend_into(&mut self.hess_bar, hess_hat, beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extreme_weights() {
        let prev = DVector::from_vec(vec![1.0, 2.0]);
        let raw = DVector::from_vec(vec![5.0, -1.0]);
        assert_eq!(update_average(&prev, &raw, 1.0).unwrap(), raw);
        assert_eq!(update_average(&prev, &raw, 0.0).unwrap(), prev);
        let z = DVector::from_vec(vec![0.0]);
        let two = DVector::from_vec(vec![2.0]);
        assert_eq!(update_average(&z, &two, 0.5).unwrap()[0], 1.0);
    }

    #[test]
    fn weight_out_of_range_is_rejected() {
        let a = DMatrix::<f64>::zeros(2, 2);
        assert!(update_average(&a, &a, 1.5).is_err());
        assert!(update_average(&a, &a, -0.1).is_err());
    }

    #[test]
    fn lagrangian_hessian_arithmetic() {
        let i = DMatrix::<f64>::identity(2, 2);
        let h = lagrangian_hessian_estimate(&i, &[i.clone()], &DVector::from_vec(vec![2.0])).unwrap();
        assert_eq!(h, &i * 3.0);
        let h0 = lagrangian_hessian_estimate(&i, &[i.clone()], &DVector::zeros(1)).unwrap();
        assert_eq!(h0, i);
        assert!(lagrangian_hessian_estimate(&i, &[i.clone()], &DVector::zeros(2)).is_err());
    }

    #[test]
    fn default_schedules() {
        let s = ScheduleSet::default();
        let v0 = schedule_eval(&s, 0);
        assert_eq!((v0.alpha, v0.beta, v0.b, v0.b_tilde), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(schedule_eval(&s, 99).alpha, 100f64.powf(-0.751));
        assert!(schedule_eval(&s, 10).beta < schedule_eval(&s, 9).beta);
        s.validate().unwrap();
        s.validate_global().unwrap();
        s.validate_inference(1.5).unwrap();
    }

    #[test]
    fn beta_is_clamped() {
        let mut s = ScheduleSet::default();
        s.beta.coef = 3.0;
        assert_eq!(schedule_eval(&s, 0).beta, 1.0);
    }

    #[test]
    fn theory_checks_reject_bad_exponents() {
        let mut s = ScheduleSet::default();
        s.alpha.exponent = 0.7;
        assert!(s.validate_global().is_err());
        let s = ScheduleSet::default();
        assert!(s.validate_inference(1.1).is_err());
    }
}
