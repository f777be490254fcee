use dfssqp::bench::{coverage_metric, emit_outputs, read_runs, run_experiment, ExperimentConfig};
use dfssqp::diagnostics::run_stabilization;
use dfssqp::{benchmark_suite, problem_by_name, run, Error, Method, NoiseModel, RunStatus, SolverConfig};
use nalgebra::{DMatrix, DVector};

// Central differences with h = 1e-6 on O(1) data.
const FD_TOL: f64 = 1e-5;
// Reference solutions are stored to about 1e-8.
const REF_KKT_TOL: f64 = 1e-6;

fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_fn(x.len(), |i, _| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

fn config(method: Method, sigma2: f64, iters: u64, seed: u64) -> SolverConfig {
    let mut cfg = SolverConfig::new(method);
    cfg.noise = NoiseModel::new(sigma2).unwrap();
    cfg.max_iters = iters;
    cfg.seed = seed;
    cfg
}

#[test]
fn suite_derivatives_match_finite_differences() {
    for p in benchmark_suite() {
        for x in [p.initial().x.clone(), p.reference().unwrap().x.clone()] {
            let g = p.gradient(&x).unwrap();
            let fd = fd_gradient(|y| p.objective(y), &x);
            assert!((&g - &fd).norm() <= FD_TOL * (1.0 + g.norm()), "{} gradient", p.name());

            let jac = p.jacobian(&x).unwrap();
            for i in 0..p.num_constraints() {
                let fd = fd_gradient(|y| p.constraints(y)[i], &x);
                let row = jac.row(i).transpose();
                assert!((&row - &fd).norm() <= FD_TOL * (1.0 + row.norm()), "{} jacobian row {i}", p.name());
            }

            let h = p.objective_hessian(&x).unwrap();
            let fd = DMatrix::from_fn(p.dim(), p.dim(), |i, j| {
                fd_gradient(|y| p.gradient(y).unwrap()[i], &x)[j]
            });
            assert!((&h - &fd).norm() <= FD_TOL * (1.0 + h.norm()), "{} hessian", p.name());
        }
    }
}

#[test]
fn reference_points_are_kkt_points() {
    for p in benchmark_suite() {
        let r = p.reference().unwrap();
        let res = p.kkt_residual(&r.x, &r.lambda).unwrap();
        assert!(res < REF_KKT_TOL, "{}: {res:e}", p.name());
        assert_eq!(p.primal_dual_error(&r.x, &r.lambda), Some(0.0));
    }
}

#[test]
fn registry_lookup() {
    assert_eq!(problem_by_name(" hs48 ").unwrap().name(), "HS48");
    assert!(matches!(problem_by_name("rosenbrock"), Err(Error::UnknownProblem(_))));
    assert_eq!(benchmark_suite().len(), 8);
}

#[test]
fn same_seed_same_trajectory() {
    let p = problem_by_name("bt9").unwrap();
    let cfg = config(Method::DfSecond, 1e-2, 2_000, 7);
    let a = run(&p, &cfg).unwrap();
    let b = run(&p, &cfg).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.lambda, b.lambda);
    assert_eq!(a.counts, b.counts);
    let c = run(&p, &config(Method::DfSecond, 1e-2, 2_000, 8)).unwrap();
    assert_ne!(a.x, c.x);
}

#[test]
fn estimator_tracing_does_not_perturb_the_run() {
    let p = problem_by_name("hs42").unwrap();
    let mut cfg = config(Method::DfSecond, 1e-2, 500, 3);
    cfg.record_every = Some(1);
    let plain = run(&p, &cfg).unwrap();
    cfg.trace_estimators = true;
    let traced = run(&p, &cfg).unwrap();
    assert_eq!(plain.x, traced.x);
    assert_eq!(plain.lambda, traced.lambda);
    assert_eq!(plain.history.len(), traced.history.len());
    for (a, b) in plain.history.iter().zip(&traced.history) {
        assert_eq!(a.x, b.x);
        assert!(a.estimator_errors.is_none());
        assert!(b.estimator_errors.is_some());
    }
}

#[test]
fn noiseless_derivative_based_converges_fast() {
    let p = problem_by_name("hs51").unwrap();
    let res = run(&p, &config(Method::DbSecond, 0.0, 20_000, 0)).unwrap();
    assert_eq!(res.status, RunStatus::Completed);
    assert!(res.final_kkt_residual.unwrap() < 1e-6);
    assert!(run_stabilization(&res).stabilized);
}

#[test]
fn coverage_of_degenerate_intervals() {
    let p = problem_by_name("maratos").unwrap();
    let x_star = p.reference().unwrap().x.clone();
    let base = run(&p, &config(Method::DfFirst, 1e-2, 2_000, 0)).unwrap();
    assert!(base.inference.is_some());

    let mut wide = base.clone();
    let snap = wide.inference.as_mut().unwrap();
    snap.sigma = DMatrix::identity(snap.sigma.nrows(), snap.sigma.ncols()) * 1e30;
    let mut narrow = base.clone();
    let snap = narrow.inference.as_mut().unwrap();
    snap.sigma.fill(0.0);
    snap.x += DVector::from_element(snap.x.len(), 1e-3);
    let mut missing = base.clone();
    missing.inference = None;

    let cov = coverage_metric(&[wide.clone()], &x_star, 0.05).unwrap();
    assert_eq!(cov.rate, Some(1.0));
    let cov = coverage_metric(&[narrow.clone()], &x_star, 0.05).unwrap();
    assert_eq!(cov.rate, Some(0.0));
    let cov = coverage_metric(&[wide, narrow, missing], &x_star, 0.05).unwrap();
    assert_eq!(cov.rate, Some(0.5));
    assert_eq!((cov.included, cov.excluded), (2, 1));
    assert!(coverage_metric(&[base], &DVector::zeros(3), 0.05).is_err());
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.problems = vec!["maratos".into(), "byrdsphr".into()];
    cfg.methods = vec![Method::DfFirst, Method::DbSecond];
    cfg.sigma2 = vec![1e-2];
    cfg.runs = 3;
    cfg.set_max_iters(400);
    cfg
}

#[test]
fn run_records_round_trip_exactly() {
    let report = run_experiment(&tiny_experiment()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_outputs(&report, dir.path()).unwrap();
    let back = read_runs(&files.runs_jsonl).unwrap();
    assert_eq!(back.len(), report.runs.len());
    for (a, b) in report.runs.iter().zip(&back) {
        assert_eq!(a.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.primal_dual_error.map(f64::to_bits), b.primal_dual_error.map(f64::to_bits));
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.covered, b.covered);
    }
}

#[test]
fn experiment_rerun_gives_identical_files() {
    let cfg = tiny_experiment();
    let dir = tempfile::tempdir().unwrap();
    let a = emit_outputs(&run_experiment(&cfg).unwrap(), &dir.path().join("a")).unwrap();
    let b = emit_outputs(&run_experiment(&cfg).unwrap(), &dir.path().join("b")).unwrap();
    for (x, y) in [(&a.summary_csv, &b.summary_csv), (&a.runs_jsonl, &b.runs_jsonl), (&a.config_json, &b.config_json)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn seeds_follow_run_index() {
    let cfg = tiny_experiment();
    let report = run_experiment(&cfg).unwrap();
    for r in &report.runs {
        assert_eq!(r.seed, cfg.base_seed + r.run_index as u64);
    }
    let c = report.cell("MARATOS", Method::DbSecond, 1e-2).unwrap();
    assert_eq!(c.runs, 3);
    assert!(c.zero_order_per_iter == 0.0);
}
