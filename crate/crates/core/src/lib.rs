//! Derivative-free stochastic sequential quadratic programming for
//! equality-constrained stochastic optimization.
//!
//! The solver estimates gradients, Jacobians and Hessians from zero-order
//! oracle calls along random simultaneous perturbations, averages them with
//! decaying weights, and takes regularized Newton steps on the KKT system
//! with an adaptive random stepsize. Derivative-based baselines and an
//! online inference layer (plug-in covariance, confidence intervals) are
//! included, along with a Monte-Carlo benchmark harness.
//!
//! ```
//! use dfssqp::{run, suite, Method, SolverConfig};
//!
//! let prob = suite::maratos();
//! let mut cfg = SolverConfig::new(Method::DfSecond);
//! cfg.max_iters = 2_000;
//! let res = run(&prob, &cfg).unwrap();
//! assert!(res.completed());
//! ```

pub mod bench;
pub mod debias;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod problem;
pub mod regularization;
pub mod rng;
pub mod solver;
pub mod spsa;
pub mod sqp;
pub mod suite;

pub use debias::{schedule_eval, update_average, EstimatorState, PowerSchedule, ScheduleSet};
pub use error::{Error, Result};
pub use inference::{CovarianceEstimate, InferenceSnapshot, IntervalScale};
pub use problem::{NoiseModel, Oracle, OracleCounts, PrimalDual, ProblemInstance};
pub use regularization::RegularizationBounds;
pub use solver::{oracle_call_audit, run, IterationRecord, Method, RunResult, RunStatus, SolverConfig};
pub use spsa::{Direction, DirectionDistribution, EstimatorOrder};
pub use sqp::{SqpParameters, StepsizeMode};
pub use suite::{benchmark_suite, problem_by_name};
