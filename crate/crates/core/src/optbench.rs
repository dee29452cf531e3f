//! Small convex problems for checking the gap bound of the smoothed barrier
//! method: `f(x~) - p* <= |1 - mu^2| m / mu`, where `x~` minimises
//! `f + sum_i shifted_barrier(g_i)` with cost limit 0.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::barrier::{performance_bound, BarrierConfig, BarrierError};

pub const DEFAULT_LR: f64 = 1e-2;
pub const DEFAULT_ITERS: usize = 100_000;
pub const GRAD_TOL: f64 = 1e-8;
pub const BOUND_SLACK: f64 = 1e-6;
pub const BENCH_MUS: [f64; 5] = [1.0, 1.5, 2.0, 3.0, 5.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error("step size must be positive, got {0}")]
    StepSize(f64),
    #[error("starting point has {got} coordinates, problem has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite iterate {x:?} at iteration {iter}")]
    NonFinite { iter: usize, x: Vec<f64> },
    #[error("unknown problem '{0}' (expected p1, p2, p3 or all)")]
    UnknownProblem(String),
}

type ScalarFn = fn(&[f64]) -> f64;
type GradFn = fn(&[f64]) -> Vec<f64>;

/// A convex objective with convex constraints `g_i(x) <= 0` and a known
/// optimal value.
#[derive(Clone)]
pub struct ConvexProblem {
    pub name: &'static str,
    pub dim: usize,
    pub f: ScalarFn,
    pub grad_f: GradFn,
    pub constraints: Vec<(ScalarFn, GradFn)>,
    pub p_star: f64,
    pub minimizer: Option<Vec<f64>>,
}

impl fmt::Debug for ConvexProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("m", &self.m())
            .field("p_star", &self.p_star)
            .finish()
    }
}

impl ConvexProblem {
    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|(g, _)| g(x)).collect()
    }

    /// Gradient of `f + sum_i shifted_barrier(g_i)`.
    pub fn penalised_grad(&self, x: &[f64], cfg: &BarrierConfig) -> Vec<f64> {
        let mut g = (self.grad_f)(x);
        for (gi, dgi) in &self.constraints {
            let lambda = cfg.grad(gi(x));
            if lambda != 0.0 {
                for (a, b) in g.iter_mut().zip(dgi(x)) {
                    *a += lambda * b;
                }
            }
        }
        g
    }
}

/// `f = x^2`, `g = 1 - x`; the constraint is active.
pub fn p1() -> ConvexProblem {
    ConvexProblem {
        name: "p1",
        dim: 1,
        f: |x| x[0] * x[0],
        grad_f: |x| vec![2.0 * x[0]],
        constraints: vec![(|x| 1.0 - x[0], |_| vec![-1.0])],
        p_star: 1.0,
        minimizer: Some(vec![1.0]),
    }
}

/// `f = (x - 2)^2`, `g = x - 3`; the unconstrained minimiser is feasible.
pub fn p2() -> ConvexProblem {
    ConvexProblem {
        name: "p2",
        dim: 1,
        f: |x| (x[0] - 2.0) * (x[0] - 2.0),
        grad_f: |x| vec![2.0 * (x[0] - 2.0)],
        constraints: vec![(|x| x[0] - 3.0, |_| vec![1.0])],
        p_star: 0.0,
        minimizer: Some(vec![2.0]),
    }
}

/// `f = |x|^2` in 2-D with `g_1 = 1 - x_1`, `g_2 = 1 - x_2`; both active.
pub fn p3() -> ConvexProblem {
    ConvexProblem {
        name: "p3",
        dim: 2,
        f: |x| x[0] * x[0] + x[1] * x[1],
        grad_f: |x| vec![2.0 * x[0], 2.0 * x[1]],
        constraints: vec![
            (|x| 1.0 - x[0], |_| vec![-1.0, 0.0]),
            (|x| 1.0 - x[1], |_| vec![0.0, -1.0]),
        ],
        p_star: 2.0,
        minimizer: Some(vec![1.0, 1.0]),
    }
}

pub fn bundled_problems() -> Vec<ConvexProblem> {
    vec![p1(), p2(), p3()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemSelection {
    P1,
    P2,
    P3,
    All,
}

impl ProblemSelection {
    pub fn problems(self) -> Vec<ConvexProblem> {
        match self {
            ProblemSelection::P1 => vec![p1()],
            ProblemSelection::P2 => vec![p2()],
            ProblemSelection::P3 => vec![p3()],
            ProblemSelection::All => bundled_problems(),
        }
    }
}

impl FromStr for ProblemSelection {
    type Err = OptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p1" => Ok(Self::P1),
            "p2" => Ok(Self::P2),
            "p3" => Ok(Self::P3),
            "all" => Ok(Self::All),
            other => Err(OptError::UnknownProblem(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Gradient descent on the barrier-penalised objective until `iters` steps
/// or a gradient norm below [`GRAD_TOL`].
pub fn solve_smoothed_barrier(
    problem: &ConvexProblem,
    cfg: &BarrierConfig,
    lr: f64,
    iters: usize,
    x0: &[f64],
) -> Result<Solution, OptError> {
    if !(lr > 0.0) {
        return Err(OptError::StepSize(lr));
    }
    if x0.len() != problem.dim {
        return Err(OptError::Dimension {
            expected: problem.dim,
            got: x0.len(),
        });
    }
    let mut x = x0.to_vec();
    for iter in 0..iters {
        let g = problem.penalised_grad(&x, cfg);
        let gn = norm(&g);
        if gn < GRAD_TOL {
            return Ok(Solution {
                x,
                iterations: iter,
                grad_norm: gn,
            });
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= lr * gi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(OptError::NonFinite { iter, x });
        }
    }
    let grad_norm = norm(&problem.penalised_grad(&x, cfg));
    Ok(Solution {
        x,
        iterations: iters,
        grad_norm,
    })
}

/// Stationarity of the Lagrangian with multipliers taken from the barrier
/// slope at each constraint value.
pub fn kkt_residual(problem: &ConvexProblem, x: &[f64], cfg: &BarrierConfig) -> f64 {
    norm(&problem.penalised_grad(x, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub gap: f64,
    pub bound: f64,
    pub ok: bool,
}

pub fn verify_bound(problem: &ConvexProblem, x: &[f64], mu: f64) -> Result<BoundCheck, OptError> {
    let gap = (problem.f)(x) - problem.p_star;
    let bound = performance_bound(mu, problem.m())?;
    Ok(BoundCheck {
        gap,
        bound,
        ok: gap <= bound + BOUND_SLACK,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub problem: &'static str,
    pub mu: f64,
    pub m: usize,
    pub x_tilde: Vec<f64>,
    pub f_value: f64,
    pub p_star: f64,
    pub gap: f64,
    pub bound: f64,
    pub kkt_residual: f64,
    pub ok: bool,
    /// `g_i(x~) <= 0` per constraint.
    pub feasible: Vec<bool>,
}

/// Solve and check one (problem, mu) cell from the origin with the default
/// step size and budget. `mu = 1` runs on the slope-saturated path.
pub fn bench_cell(problem: &ConvexProblem, mu: f64) -> Result<BenchRow, OptError> {
    let cfg = BarrierConfig::relaxed(mu, 0.0)?;
    let x0 = vec![0.0; problem.dim];
    let sol = solve_smoothed_barrier(problem, &cfg, DEFAULT_LR, DEFAULT_ITERS, &x0)?;
    let check = verify_bound(problem, &sol.x, mu)?;
    Ok(BenchRow {
        problem: problem.name,
        mu,
        m: problem.m(),
        f_value: (problem.f)(&sol.x),
        p_star: problem.p_star,
        gap: check.gap,
        bound: check.bound,
        kkt_residual: kkt_residual(problem, &sol.x, &cfg),
        ok: check.ok,
        feasible: problem.constraint_values(&sol.x).iter().map(|&g| g <= 0.0).collect(),
        x_tilde: sol.x,
    })
}

pub fn run_bench(problems: &[ConvexProblem], mus: &[f64]) -> Result<Vec<BenchRow>, OptError> {
    let mut rows = Vec::new();
    for p in problems {
        for &mu in mus {
            rows.push(bench_cell(p, mu)?);
        }
    }
    Ok(rows)
}

/// CSV with one `x_tilde_i` column per coordinate of the widest problem;
/// lower-dimensional rows leave the extra cells empty.
pub fn write_bench<W: Write>(out: W, rows: &[BenchRow]) -> csv::Result<()> {
    let width = rows.iter().map(|r| r.x_tilde.len()).max().unwrap_or(1);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["problem".to_string(), "mu".into(), "m".into()];
    header.extend((0..width).map(|i| format!("x_tilde_{i}")));
    header.extend(["f_value", "p_star", "gap", "bound", "kkt_residual", "ok"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.problem.to_string(), r.mu.to_string(), r.m.to_string()];
        rec.extend((0..width).map(|i| r.x_tilde.get(i).map(|v| v.to_string()).unwrap_or_default()));
        rec.extend([r.f_value, r.p_star, r.gap, r.bound, r.kkt_residual].map(|v| v.to_string()));
        rec.push(r.ok.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
