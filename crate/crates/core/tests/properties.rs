use dfssqp::linalg::{null_space_basis, sym_eigenvalues, symmetrize};
use dfssqp::regularization::{reduced_min_eigenvalue, regularize_hessian, regularize_jacobian};
use dfssqp::spsa::{spsa_gradient, Direction};
use dfssqp::sqp::{select_stepsize, solve_kkt, stepsize_interval, update_nu, update_tau};
use dfssqp::{update_average, PowerSchedule, RegularizationBounds, SqpParameters, StepsizeMode};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

fn signs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { -1.0 }), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spsa_directional_derivative_exact_on_quadratics(
        (a, q, x, s) in (1usize..=5).prop_flat_map(|d| (vec_strategy(d * d), vec_strategy(d), vec_strategy(d), signs(d))),
        b in 1e-3..1.0f64,
    ) {
        let d = q.len();
        let h = symmetrize(&DMatrix::from_vec(d, d, a));
        let q = DVector::from_vec(q);
        let x = DVector::from_vec(x);
        let f = |y: &DVector<f64>| 0.5 * y.dot(&(&h * y)) + q.dot(y);
        let dir = Direction::from_slice(&s).unwrap();
        let g = spsa_gradient(f(&(&x + dir.entries() * b)), f(&(&x - dir.entries() * b)), b, &dir).unwrap();
        let dd = dir.entries().dot(&(&h * &x + &q));
        for i in 0..d {
            prop_assert!((g[i] * dir.entries()[i] - dd).abs() <= 1e-9 * (1.0 + dd.abs()) / b);
        }
    }

    #[test]
    fn jacobian_regularization_meets_bounds(
        (m, vals) in (1usize..=3).prop_flat_map(|m| (Just(m), vec_strategy(m * 4))),
        scale in prop::sample::select(vec![1e-6, 1e-2, 1.0, 1e3]),
    ) {
        let g = DMatrix::from_vec(m, 4, vals) * scale;
        let bd = RegularizationBounds::default();
        let r = regularize_jacobian(&g, &bd);
        let ev = sym_eigenvalues(&(&r.g_tilde * r.g_tilde.transpose()));
        prop_assert!(ev[0] >= bd.jac_lower * (1.0 - 1e-8));
        prop_assert!(ev[m - 1] <= bd.jac_upper * (1.0 + 1e-8));
        prop_assert!(ev[m - 1] <= ev[0] * bd.jac_condition.powi(2) * (1.0 + 1e-8));
        if !r.active {
            prop_assert_eq!(&r.g_tilde, &g);
        }
    }

    #[test]
    fn hessian_regularization_meets_bounds(
        (a, gv) in (vec_strategy(16), vec_strategy(8)),
        scale in prop::sample::select(vec![1e-3, 1.0, 50.0]),
    ) {
        let b = symmetrize(&DMatrix::from_vec(4, 4, a)) * scale;
        let g = DMatrix::from_vec(2, 4, gv);
        let bd = RegularizationBounds::default();
        let gt = regularize_jacobian(&g, &bd).g_tilde;
        let r = regularize_hessian(&b, &gt, &bd);
        let z = null_space_basis(&gt);
        prop_assert!(reduced_min_eigenvalue(&r.b_tilde, &z) >= bd.hess_lower - TOL);
        let ev = sym_eigenvalues(&r.b_tilde);
        prop_assert!(ev[0].abs().max(ev[3].abs()) <= bd.hess_upper * (1.0 + 1e-8));
        if !r.active {
            prop_assert_eq!(&r.b_tilde, &b);
        }
    }

    #[test]
    fn kkt_step_solves_the_system(
        (a, gv, gl, c) in (vec_strategy(9), vec_strategy(3), vec_strategy(3), vec_strategy(1)),
    ) {
        let am = DMatrix::from_vec(3, 3, a);
        let b = &am * am.transpose() + DMatrix::identity(3, 3);
        let g = DMatrix::from_vec(1, 3, gv);
        prop_assume!(g.norm() > 0.1);
        let grad_l = DVector::from_vec(gl);
        let c = DVector::from_vec(c);
        let step = solve_kkt(&b, &g, &grad_l, &c).unwrap();
        let r1 = &b * &step.dx + g.tr_mul(&step.dlambda) + &grad_l;
        let r2 = &g * &step.dx + &c;
        prop_assert!(r1.norm() + r2.norm() <= 1e-8 * (1.0 + grad_l.norm() + c.norm()));
    }

    #[test]
    fn merit_and_ratio_parameters_never_increase(
        (g, d, c_norm) in (vec_strategy(3), vec_strategy(3), 0.0..5.0f64),
        tau in 1e-4..10.0f64,
        nu in 1e-4..10.0f64,
        dq in -1.0..5.0f64,
    ) {
        let g = DVector::from_vec(g);
        let d = DVector::from_vec(d);
        let b = DMatrix::identity(3, 3);
        let t = update_tau(tau, &g, &d, &b, c_norm, 0.5, 0.1);
        prop_assert!(t <= tau && t > 0.0);
        let n = update_nu(nu, dq, 1.0, &d, 0.1);
        prop_assert!(n <= nu && n > 0.0);
    }

    #[test]
    fn stepsize_lies_in_interval_and_under_cap(
        alpha in 1e-6..1.0f64,
        tau in 1e-4..10.0f64,
        nu in 1e-4..10.0f64,
        psi in 0.0..2.0f64,
        mode in prop::sample::select(vec![StepsizeMode::Lower, StepsizeMode::Upper, StepsizeMode::Uniform]),
        seed in any::<u64>(),
    ) {
        let params = SqpParameters { psi, stepsize_mode: mode, ..SqpParameters::default() };
        let (lo, hi) = stepsize_interval(&params, alpha, tau, nu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = select_stepsize(&params, alpha, tau, nu, &mut rng);
        prop_assert!(a <= params.stepsize_cap);
        prop_assert!(a >= lo.min(params.stepsize_cap) - 1e-15 && a <= hi + 1e-15);
    }

    #[test]
    fn averaging_stays_between_inputs(
        (p, r) in (vec_strategy(4), vec_strategy(4)),
        beta in 0.0..=1.0f64,
    ) {
        let p = DVector::from_vec(p);
        let r = DVector::from_vec(r);
        let v = update_average(&p, &r, beta).unwrap();
        for i in 0..4 {
            let (lo, hi) = (p[i].min(r[i]), p[i].max(r[i]));
            prop_assert!(v[i] >= lo - 1e-12 && v[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn schedules_decrease(coef in 0.1..10.0f64, exponent in 0.01..2.0f64, k in 0u64..1_000_000) {
        let s = PowerSchedule::new(coef, exponent);
        prop_assert!(s.at(k + 1) < s.at(k));
        prop_assert!(s.at(k) <= coef);
    }
}
