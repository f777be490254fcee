//! Monte-Carlo experiment harness: replicated runs over a grid of problems,
//! methods and noise levels, per-cell aggregation, and file output.
//!
//! Every run is seeded with `base_seed + run_index` and owns its streams,
//! so results do not depend on how runs are scheduled across threads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{NoiseModel, ProblemInstance};
use crate::solver::{run, Method, RunResult, RunStatus, SolverConfig};
use crate::suite::resolve_problems;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "DFSSQP_THREADS";

/// A run whose final primal error exceeds this is tallied as failed.
pub const FAILURE_ERROR: f64 = 1.0;

pub const DEFAULT_SIGMA2: [f64; 4] = [1e-4, 1e-2, 1e-1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Problem names, or `["all"]`.
    pub problems: Vec<String>,
    pub methods: Vec<Method>,
    pub sigma2: Vec<f64>,
    pub runs: u32,
    pub base_seed: u64,
    /// Significance level of the confidence intervals.
    pub significance: f64,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
    /// Template for every run. Method, noise and seed are overwritten per run.
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut solver = SolverConfig::new(Method::DfFirst);
        solver.max_iters = 100_000;
        solver.record_every = Some(solver.max_iters);
        Self {
            problems: vec!["all".into()],
            methods: Method::ALL.to_vec(),
            sigma2: DEFAULT_SIGMA2.to_vec(),
            runs: 50,
            base_seed: 0,
            significance: 0.05,
            threads: None,
            solver,
        }
    }
}

impl ExperimentConfig {
    /// 10⁴ iterations and 20 runs.
    pub fn fast(mut self) -> Self {
        self.runs = 20;
        self.set_max_iters(10_000);
        self
    }

    /// Change the iteration budget and keep only the final history record.
    pub fn set_max_iters(&mut self, iters: u64) {
        self.solver.max_iters = iters;
        self.solver.record_every = Some(iters.max(1));
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be >= 1".into()));
        }
        if self.methods.is_empty() || self.sigma2.is_empty() {
            return Err(Error::InvalidConfig("need at least one method and one noise level".into()));
        }
        if let Some(s) = self.sigma2.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidConfig(format!("noise variance must be finite and >= 0, got {s}")));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "significance level must be in (0, 1), got {}",
                self.significance
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be >= 1".into()));
        }
        self.solver.validate()?;
        resolve_problems(&self.problems)?;
        Ok(())
    }

    /// Worker count after applying [`THREADS_ENV`].
    pub fn worker_count(&self) -> usize {
        let base = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
        cap.map_or(base, |c| base.min(c)).max(1)
    }
}

/// One finished run, as written to `runs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem: String,
    pub method: Method,
    pub sigma2: f64,
    pub run_index: u32,
    pub seed: u64,
    pub status: RunStatus,
    pub iterations: u64,
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub final_kkt_residual: Option<f64>,
    pub primal_error: Option<f64>,
    pub primal_dual_error: Option<f64>,
    pub tau: f64,
    pub nu: f64,
    pub tau_last_change: u64,
    pub nu_last_change: u64,
    /// Per primal coordinate: does the interval contain the reference value.
    pub covered: Option<Vec<bool>>,
    /// Mean interval length over primal coordinates.
    pub ci_length: Option<f64>,
    pub zero_order_calls: u64,
    pub flops_per_iter: f64,
    pub wall_ms: Option<f64>,
    pub failed: bool,
}

/// Aggregates for one (problem, method, σ²) cell. Error and length means
/// are over non-failed runs; `None` means every run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub problem: String,
    pub method: Method,
    pub sigma2: f64,
    pub runs: u32,
    pub failures: u32,
    pub err_mean: Option<f64>,
    pub err_median: Option<f64>,
    pub kkt_mean: Option<f64>,
    pub kkt_median: Option<f64>,
    pub coverage: Option<f64>,
    /// Runs that contributed to `coverage`.
    pub coverage_runs: u32,
    pub len_mean: Option<f64>,
    pub flops: f64,
    pub zero_order_per_iter: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellReport>,
    pub runs: Vec<RunRecord>,
}

impl AggregateReport {
    pub fn all_failed(&self) -> bool {
        self.runs.iter().all(|r| r.failed)
    }

    pub fn cell(&self, problem: &str, method: Method, sigma2: f64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.problem.eq_ignore_ascii_case(problem) && c.method == method && c.sigma2 == sigma2)
    }
}

/// Coverage over a set of runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Grand mean over included runs and primal coordinates.
    pub rate: Option<f64>,
    pub included: usize,
    /// Runs without an inference snapshot.
    pub excluded: usize,
}

/// Per-coordinate containment of `x_star` in the run's intervals.
pub fn run_coverage(res: &RunResult, x_star: &DVector<f64>, phi: f64) -> Result<Option<Vec<bool>>> {
    let Some(snap) = &res.inference else { return Ok(None) };
    if x_star.len() != snap.x.len() {
        return Err(Error::InvalidArgument(format!(
            "reference has {} coordinates, iterate has {}",
            x_star.len(),
            snap.x.len()
        )));
    }
    let iv = snap.intervals(phi)?;
    Ok(Some(x_star.iter().zip(&iv).map(|(v, (lo, hi))| lo <= v && v <= hi).collect()))
}

pub fn coverage_metric(runs: &[RunResult], x_star: &DVector<f64>, phi: f64) -> Result<Coverage> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut included = 0usize;
    for r in runs {
        if let Some(c) = run_coverage(r, x_star, phi)? {
            included += 1;
            total += c.len();
            hits += c.iter().filter(|&&b| b).count();
        }
    }
    Ok(Coverage {
        rate: (total > 0).then(|| hits as f64 / total as f64),
        included,
        excluded: runs.len() - included,
    })
}

struct Job {
    cell: usize,
    problem: usize,
    method: Method,
    sigma2: f64,
    run_index: u32,
}

fn record_run(
    prob: &ProblemInstance,
    res: &RunResult,
    sigma2: f64,
    run_index: u32,
    phi: f64,
) -> Result<RunRecord> {
    let (covered, ci_length) = match (prob.reference(), &res.inference) {
        (Some(r), Some(snap)) if res.completed() => {
            let iv = snap.intervals(phi)?;
            let d = r.x.len();
            let len = iv[..d].iter().map(|(lo, hi)| hi - lo).sum::<f64>() / d as f64;
            (run_coverage(res, &r.x, phi)?, Some(len))
        }
        _ => (None, None),
    };
    let failed = !res.completed() || res.primal_error.is_none_or(|e| !(e <= FAILURE_ERROR));
    Ok(RunRecord {
        problem: res.problem.clone(),
        method: res.method,
        sigma2,
        run_index,
        seed: res.seed,
        status: res.status.clone(),
        iterations: res.iterations,
        x: res.x.as_slice().to_vec(),
        lambda: res.lambda.as_slice().to_vec(),
        final_kkt_residual: res.final_kkt_residual,
        primal_error: res.primal_error,
        primal_dual_error: res.primal_dual_error,
        tau: res.tau,
        nu: res.nu,
        tau_last_change: res.tau_last_change,
        nu_last_change: res.nu_last_change,
        covered,
        ci_length,
        zero_order_calls: res.counts.zero_order(),
        flops_per_iter: res.flops_per_iter,
        wall_ms: res.wall_ms,
        failed,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Summarize the records of one cell, taken in run-index order.
pub fn aggregate_cell(problem: &str, method: Method, sigma2: f64, records: &[RunRecord]) -> CellReport {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.failed).collect();
    let errs: Vec<f64> = ok.iter().filter_map(|r| r.primal_dual_error).collect();
    let kkts: Vec<f64> = ok.iter().filter_map(|r| r.final_kkt_residual).collect();
    let lens: Vec<f64> = ok.iter().filter_map(|r| r.ci_length).collect();
    let (mut hits, mut total, mut cov_runs) = (0usize, 0usize, 0u32);
    for c in ok.iter().filter_map(|r| r.covered.as_ref()) {
        cov_runs += 1;
        total += c.len();
        hits += c.iter().filter(|&&b| b).count();
    }
    let walls: Vec<f64> = records.iter().filter_map(|r| r.wall_ms).collect();
    let zo: Vec<f64> = records
        .iter()
        .filter(|r| r.iterations > 0)
        .map(|r| r.zero_order_calls as f64 / r.iterations as f64)
        .collect();
    CellReport {
        problem: problem.to_string(),
        method,
        sigma2,
        runs: records.len() as u32,
        failures: (records.len() - ok.len()) as u32,
        err_mean: mean(&errs),
        err_median: median(&errs),
        kkt_mean: mean(&kkts),
        kkt_median: median(&kkts),
        coverage: (total > 0).then(|| hits as f64 / total as f64),
        coverage_runs: cov_runs,
        len_mean: mean(&lens),
        flops: records.first().map_or(f64::NAN, |r| r.flops_per_iter),
        zero_order_per_iter: mean(&zo).unwrap_or(0.0),
        wall_ms: (walls.len() == records.len()).then(|| mean(&walls)).flatten(),
    }
}

/// Execute every run of the grid and aggregate. Configuration and
/// capability errors abort the experiment; numerical failures inside a run
/// are recorded on that run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let problems = resolve_problems(&cfg.problems)?;
    let mut jobs = Vec::new();
    let mut cells = Vec::new();
    for (pi, p) in problems.iter().enumerate() {
        for &method in &cfg.methods {
            for &sigma2 in &cfg.sigma2 {
                for run_index in 0..cfg.runs {
                    jobs.push(Job { cell: cells.len(), problem: pi, method, sigma2, run_index });
                }
                cells.push((p.name().to_string(), method, sigma2));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let records: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let prob = &problems[job.problem];
                let mut sc = cfg.solver.clone();
                sc.method = job.method;
                sc.noise = NoiseModel::new(job.sigma2)?;
                sc.seed = cfg.base_seed.wrapping_add(job.run_index as u64);
                let res = run(prob, &sc)?;
                record_run(prob, &res, job.sigma2, job.run_index, cfg.significance)
            })
            .collect()
    });
    let runs: Vec<RunRecord> = records.into_iter().collect::<Result<_>>()?;
    let mut by_cell: Vec<Vec<RunRecord>> = vec![Vec::new(); cells.len()];
    for (job, rec) in jobs.iter().zip(&runs) {
        by_cell[job.cell].push(rec.clone());
    }
    let cells = cells
        .iter()
        .zip(&by_cell)
        .map(|((p, m, s), recs)| aggregate_cell(p, *m, *s, recs))
        .collect();
    Ok(AggregateReport { config: cfg.clone(), cells, runs })
}

pub const CSV_HEADER: &str = "problem,method,sigma2,err_mean,cov,len_mean,flops,wall_ms,failures";

fn sci(v: f64) -> String {
    format!("{v:.5e}")
}

/// One CSV row; `/` marks a cell whose runs all failed, `NA` a value that
/// was not measured.
pub fn csv_row(c: &CellReport) -> String {
    let all_failed = c.failures == c.runs;
    let opt = |v: Option<f64>| match v {
        Some(v) => sci(v),
        None if all_failed => "/".to_string(),
        None => "NA".to_string(),
    };
    format!(
        "{},{},{},{},{},{},{},{},{}",
        c.problem,
        c.method,
        sci(c.sigma2),
        opt(c.err_mean),
        opt(c.coverage),
        opt(c.len_mean),
        sci(c.flops),
        c.wall_ms.map_or("NA".to_string(), sci),
        c.failures
    )
}

pub fn summary_csv(report: &AggregateReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in &report.cells {
        out.push_str(&csv_row(c));
        out.push('\n');
    }
    out
}

/// Paths written by [`emit_outputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputFiles {
    pub summary_csv: PathBuf,
    pub summary_json: PathBuf,
    pub runs_jsonl: PathBuf,
    pub config_json: PathBuf,
}

/// Write `summary.csv`, `summary.json`, `runs.jsonl` and `config.json`
/// into `dir`, creating it if needed.
pub fn emit_outputs(report: &AggregateReport, dir: &Path) -> Result<OutputFiles> {
    fs::create_dir_all(dir)?;
    let files = OutputFiles {
        summary_csv: dir.join("summary.csv"),
        summary_json: dir.join("summary.json"),
        runs_jsonl: dir.join("runs.jsonl"),
        config_json: dir.join("config.json"),
    };
    fs::write(&files.summary_csv, summary_csv(report))?;
    fs::write(&files.summary_json, serde_json::to_string_pretty(&report.cells)?)?;
    fs::write(&files.config_json, serde_json::to_string_pretty(&report.config)?)?;
    let mut w = std::io::BufWriter::new(fs::File::create(&files.runs_jsonl)?);
    for r in &report.runs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(files)
}

/// Read back a `runs.jsonl` file.
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn all_failed_cell_prints_slash() {
        let c = CellReport {
            problem: "BT9".into(),
            method: Method::DfSecond,
            sigma2: 1.0,
            runs: 2,
            failures: 2,
            err_mean: None,
            err_median: None,
            kkt_mean: None,
            kkt_median: None,
            coverage: None,
            coverage_runs: 0,
            len_mean: None,
            flops: 10.0,
            zero_order_per_iter: 8.0,
            wall_ms: None,
        };
        assert_eq!(csv_row(&c), "BT9,df-second,1.00000e0,/,/,/,1.00000e1,NA,2");
    }

    #[test]
    fn zero_threads_rejected() {
        let cfg = ExperimentConfig { threads: Some(0), ..ExperimentConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
