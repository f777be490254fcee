use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dfssqp::bench::{emit_outputs, run_experiment, summary_csv, ExperimentConfig};
use dfssqp::diagnostics::{
    bias_slope_fit, estimator_error_trace, gradient_bias_enumerated, run_stabilization,
};
use dfssqp::{benchmark_suite, problem_by_name, run, Error, NoiseModel, SolverConfig, StepsizeMode};
use nalgebra::DVector;

const EXIT_CONFIG: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "dfssqp", version, about = "Derivative-free stochastic SQP solver and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the benchmark registry.
    ListProblems,
    /// Run one trajectory and print the inference snapshot.
    Solve(SolveArgs),
    /// Replicated runs over problems, methods and noise levels.
    Bench(BenchArgs),
    /// Estimator and parameter probes.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "df-second")]
    method: String,
    #[arg(long, default_value_t = 0.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 100_000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// lower, upper or uniform.
    #[arg(long, default_value = "upper")]
    alpha_mode: String,
}

impl RunArgs {
    fn solver_config(&self) -> dfssqp::Result<SolverConfig> {
        let mut cfg = SolverConfig::new(self.method.parse()?);
        cfg.noise = NoiseModel::new(self.sigma2).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.max_iters = self.iters;
        cfg.seed = self.seed;
        cfg.params.stepsize_mode = self.alpha_mode.parse::<StepsizeMode>()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    problem: String,
    #[command(flatten)]
    run: RunArgs,
    /// Significance level of the printed intervals.
    #[arg(long, default_value_t = 0.05)]
    phi: f64,
    /// Print the full run result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated names, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    problems: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "df-first,df-second,db-first,db-second")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    sigma2: Option<Vec<f64>>,
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "upper")]
    alpha_mode: String,
    #[arg(long, default_value_t = 0.05)]
    phi: f64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// 10⁴ iterations and 20 runs unless overridden.
    #[arg(long)]
    fast: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Record wall time per run. Makes the summary nondeterministic.
    #[arg(long)]
    timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Probe {
    BiasSlope,
    EstimatorTrace,
    Stabilization,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, value_enum)]
    probe: Probe,
    #[arg(long, default_value = "maratos")]
    problem: String,
    #[command(flatten)]
    run: RunArgs,
    /// Keep the iterate at x₀ (estimator-trace only).
    #[arg(long)]
    frozen: bool,
    /// Perturbation sizes for bias-slope.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.025,0.0125")]
    grid: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::ListProblems => list_problems(),
        Command::Solve(a) => solve(&a),
        Command::Bench(a) => bench(&a),
        Command::Diagnose(a) => diagnose(&a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<Error>(),
                    Some(Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::UnknownProblem(_))
                )
            });
            ExitCode::from(if config { EXIT_CONFIG } else { 1 })
        }
    }
}

fn list_problems() -> anyhow::Result<ExitCode> {
    println!("{:<10} {:>2} {:>2}  description", "name", "d", "m");
    for p in benchmark_suite() {
        println!("{:<10} {:>2} {:>2}  {}", p.name(), p.dim(), p.num_constraints(), p.description());
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn solve(a: &SolveArgs) -> anyhow::Result<ExitCode> {
    let prob = problem_by_name(&a.problem)?;
    let cfg = a.run.solver_config()?;
    let res = run(&prob, &cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&res)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("problem   {}", res.problem);
    println!("method    {}", res.method);
    println!("status    {:?}", res.status);
    println!("iters     {}", res.iterations);
    println!("x         {}", fmt_vec(&res.x));
    println!("lambda    {}", fmt_vec(&res.lambda));
    println!("tau       {:.6e} (last change {})", res.tau, res.tau_last_change);
    println!("nu        {:.6e} (last change {})", res.nu, res.nu_last_change);
    if let Some(r) = res.final_kkt_residual {
        println!("kkt       {r:.6e}");
    }
    if let Some(e) = res.primal_dual_error {
        println!("error     {e:.6e}");
    }
    if let Some(snap) = &res.inference {
        println!("zeta      {:.6e}", snap.zeta);
        println!("omega     {:.6e}", snap.omega);
        println!("alpha     {:.6e}", snap.alpha_scale);
        println!("reliable  {}", snap.reliable);
        let d = snap.x.len();
        for (i, (lo, hi)) in snap.intervals(a.phi)?.into_iter().enumerate() {
            let name = if i < d { format!("x[{i}]") } else { format!("lambda[{}]", i - d) };
            println!("  {name:<10} [{lo:.6e}, {hi:.6e}]");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(a: &BenchArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = ExperimentConfig::default();
    if a.fast {
        cfg = cfg.fast();
    }
    cfg.problems = a.problems.clone();
    cfg.methods = a.methods.iter().map(|m| m.parse()).collect::<dfssqp::Result<_>>()?;
    if let Some(s) = &a.sigma2 {
        cfg.sigma2 = s.clone();
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(k) = a.iters {
        cfg.set_max_iters(k);
    }
    cfg.base_seed = a.seed;
    cfg.significance = a.phi;
    cfg.threads = a.threads;
    cfg.solver.timing = a.timing;
    cfg.solver.params.stepsize_mode = a.alpha_mode.parse::<StepsizeMode>()?;
    cfg.validate()?;

    let report = run_experiment(&cfg)?;
    let files = emit_outputs(&report, &a.out).with_context(|| format!("writing to {}", a.out.display()))?;
    print!("{}", summary_csv(&report));
    eprintln!("wrote {}", files.summary_csv.display());
    if report.all_failed() {
        eprintln!("all runs failed");
        return Ok(ExitCode::from(EXIT_ALL_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

fn diagnose(a: &DiagnoseArgs) -> anyhow::Result<ExitCode> {
    match a.probe {
        Probe::BiasSlope => {
            // f(x) = x³ at x = 1, where the central-difference bias is exactly b².
            let f = |x: &DVector<f64>| x[0].powi(3);
            let x = DVector::from_element(1, 1.0);
            let g = DVector::from_element(1, 3.0);
            let mut pts = Vec::with_capacity(a.grid.len());
            for &b in &a.grid {
                let bias = gradient_bias_enumerated(&f, &g, &x, b)?;
                println!("b={b:.6e} bias={bias:.6e}");
                pts.push((b, bias));
            }
            let fit = bias_slope_fit(&pts)?;
            if fit.exact {
                println!("exact (no bias)");
            } else {
                println!("slope={:.6} intercept={:.6}", fit.slope, fit.intercept);
            }
        }
        Probe::EstimatorTrace => {
            let prob = problem_by_name(&a.problem)?;
            let mut cfg = a.run.solver_config()?;
            cfg.trace_estimators = true;
            cfg.frozen_iterate = a.frozen;
            let res = run(&prob, &cfg)?;
            println!("k,gradient,jacobian,hessian");
            for p in estimator_error_trace(&res)? {
                println!("{},{:.6e},{:.6e},{:.6e}", p.k, p.gradient, p.jacobian, p.hessian);
            }
        }
        Probe::Stabilization => {
            let prob = problem_by_name(&a.problem)?;
            let cfg = a.run.solver_config()?;
            let res = run(&prob, &cfg)?;
            let rep = run_stabilization(&res);
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
