//! Hand-coded benchmark problems from the Hock–Schittkowski and CUTEst
//! collections, with exact derivatives and documented solutions.
//!
//! Only the standard small dimensions are provided. Reference multipliers
//! are recovered by least squares at the reference primal point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::ProblemInstance;

/// Names of the benchmark problems, in table order.
pub const SUITE_NAMES: [&str; 8] = [
    "MARATOS", "HS48", "BT9", "BYRDSPHR", "BT1", "HS51", "BT12", "HS42",
];

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn rows(m: usize, d: usize, xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, d, xs)
}

fn diag(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&v(xs))
}

pub fn maratos() -> ProblemInstance {
    const TAU: f64 = 1e-6;
    ProblemInstance::builder("MARATOS", 2, 1)
        .description("Maratos effect: linear objective, unit circle constraint")
        .objective(|x| -x[0] + TAU * (x[0] * x[0] + x[1] * x[1] - 1.0))
        .constraints(|x| v(&[x[0] * x[0] + x[1] * x[1] - 1.0]))
        .gradient(|x| v(&[-1.0 + 2.0 * TAU * x[0], 2.0 * TAU * x[1]]))
        .jacobian(|x| rows(1, 2, &[2.0 * x[0], 2.0 * x[1]]))
        .hessians(
            |_| DMatrix::identity(2, 2) * (2.0 * TAU),
            |_| vec![DMatrix::identity(2, 2) * 2.0],
        )
        .initial_point(&[1.1, 0.1])
        .reference_point(&[1.0, 0.0])
        .build()
        .expect("MARATOS definition")
}

pub fn hs48() -> ProblemInstance {
    ProblemInstance::builder("HS48", 5, 2)
        .description("Hock-Schittkowski 48: convex quadratic, two linear constraints")
        .objective(|x| (x[0] - 1.0).powi(2) + (x[1] - x[2]).powi(2) + (x[3] - x[4]).powi(2))
        .constraints(|x| v(&[x.sum() - 5.0, x[2] - 2.0 * (x[3] + x[4]) + 3.0]))
        .gradient(|x| {
            let a = 2.0 * (x[1] - x[2]);
            let b = 2.0 * (x[3] - x[4]);
            v(&[2.0 * (x[0] - 1.0), a, -a, b, -b])
        })
        .jacobian(|_| rows(2, 5, &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, -2.0, -2.0]))
        .hessians(
            |_| {
                rows(
                    5,
                    5,
                    &[
                        2.0, 0.0, 0.0, 0.0, 0.0, //
                        0.0, 2.0, -2.0, 0.0, 0.0, //
                        0.0, -2.0, 2.0, 0.0, 0.0, //
                        0.0, 0.0, 0.0, 2.0, -2.0, //
                        0.0, 0.0, 0.0, -2.0, 2.0,
                    ],
                )
            },
            |_| vec![DMatrix::zeros(5, 5); 2],
        )
        .initial_point(&[3.0, 5.0, -3.0, 2.0, -2.0])
        .reference_point(&[1.0; 5])
        .build()
        .expect("HS48 definition")
}

pub fn bt9() -> ProblemInstance {
    ProblemInstance::builder("BT9", 4, 2)
        .description("Byrd-Tapia 9: linear objective, two cubic/quadratic constraints")
        .objective(|x| -x[0])
        .constraints(|x| {
            v(&[
                x[1] - x[0].powi(3) - x[2] * x[2],
                x[0] * x[0] - x[1] - x[3] * x[3],
            ])
        })
        .gradient(|_| v(&[-1.0, 0.0, 0.0, 0.0]))
        .jacobian(|x| {
            rows(
                2,
                4,
                &[
                    -3.0 * x[0] * x[0], 1.0, -2.0 * x[2], 0.0, //
                    2.0 * x[0], -1.0, 0.0, -2.0 * x[3],
                ],
            )
        })
        .hessians(
            |_| DMatrix::zeros(4, 4),
            |x| vec![diag(&[-6.0 * x[0], 0.0, -2.0, 0.0]), diag(&[2.0, 0.0, 0.0, -2.0])],
        )
        .initial_point(&[2.0; 4])
        .reference_point(&[1.0, 1.0, 0.0, 0.0])
        .build()
        .expect("BT9 definition")
}

pub fn byrdsphr() -> ProblemInstance {
    let a = 4.375_f64.sqrt();
    ProblemInstance::builder("BYRDSPHR", 3, 2)
        .description("Byrd sphere: linear objective, intersection of two spheres")
        .objective(|x| -x[0] - x[1] - x[2])
        .constraints(|x| {
            let r = x[1] * x[1] + x[2] * x[2];
            v(&[x[0] * x[0] + r - 9.0, (x[0] - 1.0).powi(2) + r - 9.0])
        })
        .gradient(|_| v(&[-1.0, -1.0, -1.0]))
        .jacobian(|x| {
            rows(
                2,
                3,
                &[
                    2.0 * x[0], 2.0 * x[1], 2.0 * x[2], //
                    2.0 * (x[0] - 1.0), 2.0 * x[1], 2.0 * x[2],
                ],
            )
        })
        .hessians(
            |_| DMatrix::zeros(3, 3),
            |_| vec![DMatrix::identity(3, 3) * 2.0, DMatrix::identity(3, 3) * 2.0],
        )
        .initial_point(&[5.0, 1e-4, -1e-4])
        .reference_point(&[0.5, a, a])
        .build()
        .expect("BYRDSPHR definition")
}

pub fn bt1() -> ProblemInstance {
    ProblemInstance::builder("BT1", 2, 1)
        .description("Byrd-Tapia 1: penalized linear objective, unit circle constraint")
        .objective(|x| -x[0] + 10.0 * (x[0] * x[0] + x[1] * x[1] - 1.0))
        .constraints(|x| v(&[x[0] * x[0] + x[1] * x[1] - 1.0]))
        .gradient(|x| v(&[-1.0 + 20.0 * x[0], 20.0 * x[1]]))
        .jacobian(|x| rows(1, 2, &[2.0 * x[0], 2.0 * x[1]]))
        .hessians(
            |_| DMatrix::identity(2, 2) * 20.0,
            |_| vec![DMatrix::identity(2, 2) * 2.0],
        )
        .initial_point(&[0.08, 0.06])
        .reference_point(&[1.0, 0.0])
        .build()
        .expect("BT1 definition")
}

pub fn hs51() -> ProblemInstance {
    ProblemInstance::builder("HS51", 5, 3)
        .description("Hock-Schittkowski 51: convex quadratic, three linear constraints")
        .objective(|x| {
            (x[0] - x[1]).powi(2) + (x[1] + x[2] - 2.0).powi(2) + (x[3] - 1.0).powi(2) + (x[4] - 1.0).powi(2)
        })
        .constraints(|x| {
            v(&[
                x[0] + 3.0 * x[1] - 4.0,
                x[2] + x[3] - 2.0 * x[4],
                x[1] - x[4],
            ])
        })
        .gradient(|x| {
            let a = 2.0 * (x[0] - x[1]);
            let b = 2.0 * (x[1] + x[2] - 2.0);
            v(&[a, -a + b, b, 2.0 * (x[3] - 1.0), 2.0 * (x[4] - 1.0)])
        })
        .jacobian(|_| {
            rows(
                3,
                5,
                &[
                    1.0, 3.0, 0.0, 0.0, 0.0, //
                    0.0, 0.0, 1.0, 1.0, -2.0, //
                    0.0, 1.0, 0.0, 0.0, -1.0,
                ],
            )
        })
        .hessians(
            |_| {
                rows(
                    5,
                    5,
                    &[
                        2.0, -2.0, 0.0, 0.0, 0.0, //
                        -2.0, 4.0, 2.0, 0.0, 0.0, //
                        0.0, 2.0, 2.0, 0.0, 0.0, //
                        0.0, 0.0, 0.0, 2.0, 0.0, //
                        0.0, 0.0, 0.0, 0.0, 2.0,
                    ],
                )
            },
            |_| vec![DMatrix::zeros(5, 5); 3],
        )
        .initial_point(&[2.5, 0.5, 2.0, -1.0, 0.5])
        .reference_point(&[1.0; 5])
        .build()
        .expect("HS51 definition")
}

pub fn bt12() -> ProblemInstance {
    let x1: f64 = 2500.0 / 101.0;
    let x2: f64 = 25.0 / 101.0;
    let x4 = (x1 * x1 + x2 * x2 - 25.0).sqrt();
    let x5 = (x1 - 2.0).sqrt();
    ProblemInstance::builder("BT12", 5, 3)
        .description("Byrd-Tapia 12: quadratic objective, slack-squared constraints")
        .objective(|x| 0.01 * x[0] * x[0] + x[1] * x[1])
        .constraints(|x| {
            v(&[
                x[0] + x[1] - x[2] * x[2] - 25.0,
                x[0] * x[0] + x[1] * x[1] - x[3] * x[3] - 25.0,
                x[0] - x[4] * x[4] - 2.0,
            ])
        })
        .gradient(|x| v(&[0.02 * x[0], 2.0 * x[1], 0.0, 0.0, 0.0]))
        .jacobian(|x| {
            rows(
                3,
                5,
                &[
                    1.0, 1.0, -2.0 * x[2], 0.0, 0.0, //
                    2.0 * x[0], 2.0 * x[1], 0.0, -2.0 * x[3], 0.0, //
                    1.0, 0.0, 0.0, 0.0, -2.0 * x[4],
                ],
            )
        })
        .hessians(
            |_| diag(&[0.02, 2.0, 0.0, 0.0, 0.0]),
            |_| {
                vec![
                    diag(&[0.0, 0.0, -2.0, 0.0, 0.0]),
                    diag(&[2.0, 2.0, 0.0, -2.0, 0.0]),
                    diag(&[0.0, 0.0, 0.0, 0.0, -2.0]),
                ]
            },
        )
        .initial_point(&[15.811, 1.5811, 0.0, 15.083, 3.7164])
        .reference_point(&[x1, x2, 0.0, x4, x5])
        .build()
        .expect("BT12 definition")
}

pub fn hs42() -> ProblemInstance {
    let r = 2.0_f64.sqrt();
    ProblemInstance::builder("HS42", 4, 2)
        .description("Hock-Schittkowski 42: separable quadratic, linear and circle constraints")
        .objective(|x| {
            (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2) + (x[2] - 3.0).powi(2) + (x[3] - 4.0).powi(2)
        })
        .constraints(|x| v(&[x[0] - 2.0, x[2] * x[2] + x[3] * x[3] - 2.0]))
        .gradient(|x| {
            v(&[
                2.0 * (x[0] - 1.0),
                2.0 * (x[1] - 2.0),
                2.0 * (x[2] - 3.0),
                2.0 * (x[3] - 4.0),
            ])
        })
        .jacobian(|x| rows(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0 * x[2], 2.0 * x[3]]))
        .hessians(
            |_| DMatrix::identity(4, 4) * 2.0,
            |_| vec![DMatrix::zeros(4, 4), diag(&[0.0, 0.0, 2.0, 2.0])],
        )
        .initial_point(&[1.0; 4])
        .reference_point(&[2.0, 2.0, 0.6 * r, 0.8 * r])
        .build()
        .expect("HS42 definition")
}

/// The eight benchmark problems in table order.
pub fn benchmark_suite() -> Vec<ProblemInstance> {
    vec![maratos(), hs48(), bt9(), byrdsphr(), bt1(), hs51(), bt12(), hs42()]
}

/// Case-insensitive registry lookup.
pub fn problem_by_name(name: &str) -> Result<ProblemInstance> {
    let key = name.trim().to_ascii_uppercase();
    let p = match key.as_str() {
        "MARATOS" => maratos(),
        "HS48" => hs48(),
        "BT9" => bt9(),
        "BYRDSPHR" => byrdsphr(),
        "BT1" => bt1(),
        "HS51" => hs51(),
        "BT12" => bt12(),
        "HS42" => hs42(),
        _ => return Err(Error::UnknownProblem(name.to_string())),
    };
    Ok(p)
}

/// Resolve a comma list of names, or `all`.
pub fn resolve_problems(names: &[String]) -> Result<Vec<ProblemInstance>> {
    if names.is_empty() || names.iter().any(|n| n.eq_ignore_ascii_case("all")) {
        return Ok(benchmark_suite());
    }
    names.iter().map(|n| problem_by_name(n)).collect()
}
