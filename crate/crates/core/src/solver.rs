//! Iterative and dense solvers for assembled [`LinearProblem`]s.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::environment::EnvironmentField;
use crate::error::{Error, Result};
use crate::lattice::{GridDomain, GridFunction};
use crate::operator::{assemble_adjoint, Gauge, LinearProblem};

/// Largest domain the dense oracle accepts.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Jacobi-preconditioned BiCGSTAB.
    StabilizedKrylov,
    WeightedJacobi,
    /// Lazy power iteration; only for balance (unit-sum) systems.
    PowerIteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    pub tol: f64,
    pub max_iters: usize,
    pub jacobi_weight: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { method: Method::StabilizedKrylov, tol: 1e-10, max_iters: 20_000, jacobi_weight: 0.8 }
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64) -> Self {
        SolverConfig { tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance {} must be positive", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.jacobi_weight > 0.0 && self.jacobi_weight <= 1.0) {
            return Err(Error::InvalidParameter(format!("Jacobi weight {} not in (0, 1]", self.jacobi_weight)));
        }
        Ok(())
    }
}

/// Solution plus telemetry.
///
/// `residual_inf` is `‖b - A u‖∞`. For unit-sum (balance) systems it is measured
/// on `ρ = n · m`, the density relative to the uniform one.
#[derive(Clone, Debug)]
pub struct SolveResult {
    pub solution: GridFunction,
    pub residual_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Sup norm; NaN if any entry is NaN.
fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() || m.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The assembled operator, optionally with the rank-one shift `x ↦ A x - mean(x) 1`.
///
/// On a torus without mass both the corrector operator and the balance
/// operator have one-dimensional kernels, and Krylov iterations on them can
/// break down. The shifted operator is nonsingular (pairing `B x = 0` with the
/// left null vector forces `mean(x) = 0`, hence `A x = 0` and `x = 0`), and a
/// solution of `B x = b` with `b` in the range of `A` solves `A x = b` with
/// `mean(x) = 0`.
struct Op<'a> {
    problem: &'a LinearProblem,
    shift: bool,
}

impl Op<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.problem.apply(x, y);
        if self.shift {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            y.iter_mut().for_each(|v| *v -= mean);
        }
    }

    fn center(&self, r: usize) -> f64 {
        self.problem.center(r)
    }
}

fn residual(p: &Op, b: &[f64], x: &[f64], r: &mut [f64]) {
    p.apply(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

struct Outcome {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
}

fn bicgstab(p: &Op, b: &[f64], target: f64, max_iters: usize) -> Outcome {
    let n = b.len();
    let inv_diag: Vec<f64> = (0..n).map(|r| 1.0 / p.center(r)).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut res = inf_norm(&r);
    let mut iterations = 0;
    if res <= target {
        return Outcome { x, residual: res, iterations, converged: true };
    }
    let (mut rhat, mut pv, mut v) = (r.clone(), vec![0.0; n], vec![0.0; n]);
    let (mut phat, mut s, mut shat, mut t) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut rho_old, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let restart = |r: &[f64], rhat: &mut Vec<f64>, pv: &mut Vec<f64>, v: &mut Vec<f64>| {
        rhat.copy_from_slice(r);
        pv.iter_mut().for_each(|e| *e = 0.0);
        v.iter_mut().for_each(|e| *e = 0.0);
    };
    while iterations < max_iters {
        iterations += 1;
        let rho = dot(&rhat, &r);
        if rho.abs() < 1e-300 || omega == 0.0 {
            restart(&r, &mut rhat, &mut pv, &mut v);
            rho_old = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        let beta = (rho / rho_old) * (alpha / omega);
        for i in 0..n {
            pv[i] = r[i] + beta * (pv[i] - omega * v[i]);
            phat[i] = pv[i] * inv_diag[i];
        }
        p.apply(&phat, &mut v);
        let denom = dot(&rhat, &v);
        if denom == 0.0 || !denom.is_finite() {
            restart(&r, &mut rhat, &mut pv, &mut v);
            rho_old = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        alpha = rho / denom;
        if !alpha.is_finite() {
            restart(&r, &mut rhat, &mut pv, &mut v);
            rho_old = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if inf_norm(&s) <= target {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            residual(p, b, &x, &mut r);
            res = inf_norm(&r);
            if res <= target {
                return Outcome { x, residual: res, iterations, converged: true };
            }
            restart(&r, &mut rhat, &mut pv, &mut v);
            rho_old = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        for i in 0..n {
            shat[i] = s[i] * inv_diag[i];
        }
        p.apply(&shat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        if !omega.is_finite() || omega == 0.0 {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            r.copy_from_slice(&s);
            restart(&r, &mut rhat, &mut pv, &mut v);
            rho_old = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        rho_old = rho;
        if inf_norm(&r) <= target {
            // Confirm against the true residual; recurrences drift.
            residual(p, b, &x, &mut r);
            res = inf_norm(&r);
            if res <= target {
                return Outcome { x, residual: res, iterations, converged: true };
            }
            restart(&r, &mut rhat, &mut pv, &mut v);
            rho_old = 1.0;
            alpha = 1.0;
            omega = 1.0;
        }
    }
    residual(p, b, &x, &mut r);
    res = inf_norm(&r);
    Outcome { x, residual: res, iterations, converged: res <= target }
}

fn weighted_jacobi(p: &Op, b: &[f64], target: f64, max_iters: usize, weight: f64) -> Outcome {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut res = inf_norm(&r);
    let mut iterations = 0;
    while res > target && iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            x[i] += weight * r[i] / p.center(i);
        }
        residual(p, b, &x, &mut r);
        res = inf_norm(&r);
    }
    Outcome { x, residual: res, iterations, converged: res <= target }
}

fn subtract_mean(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// Solves `problem` iteratively from a zero initial guess.
///
/// Converged iff `‖b - A u‖∞ <= tol · problem.residual_scale()`, further divided
/// by [`LinearProblem::error_amplification`] for Dirichlet problems so that
/// `tol · residual_scale` bounds the sup-norm error there. Running out of
/// iterations is not an error: the best iterate is returned with
/// `converged = false`.
pub fn solve_iterative(problem: &LinearProblem, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    if problem.is_structurally_singular() {
        return Err(Error::SingularSystem("torus operator without mass or gauge".into()));
    }
    if let Some(r) = (0..problem.unknown_count()).find(|&r| problem.center(r) == 0.0) {
        return Err(Error::SingularSystem(format!("zero diagonal in row {r}")));
    }
    if problem.gauge() == Gauge::UnitSum {
        return solve_balance(problem, config);
    }
    if config.method == Method::PowerIteration {
        return Err(Error::InvalidParameter("power iteration only solves balance systems".into()));
    }
    let b = problem.effective_rhs();
    let target = config.tol * problem.residual_scale() / problem.error_amplification().unwrap_or(1.0);
    let zero_mean = problem.gauge() == Gauge::ZeroMean;
    let mut out = run(&Op { problem, shift: zero_mean }, &b, target, config);
    if zero_mean {
        subtract_mean(&mut out.x);
        let mut r = vec![0.0; b.len()];
        residual(&Op { problem, shift: false }, &b, &out.x, &mut r);
        out.residual = inf_norm(&r);
        out.converged = out.residual <= target;
    }
    Ok(SolveResult {
        solution: problem.to_grid(&out.x),
        residual_inf: out.residual,
        iterations: out.iterations,
        converged: out.converged,
    })
}

fn run(problem: &Op, b: &[f64], target: f64, config: &SolverConfig) -> Outcome {
    // With the shift, `b - A x = (b - B x) - mean(x) 1` and `|mean(x)| <= ‖b - B x‖∞`.
    let target = if problem.shift { 0.5 * target } else { target };
    match config.method {
        Method::WeightedJacobi => weighted_jacobi(problem, b, target, config.max_iters, config.jacobi_weight),
        _ => bicgstab(problem, b, target, config.max_iters),
    }
}

/// Balance systems `A m = 0`, `Σ m = 1`.
///
/// Krylov and Jacobi solve for the correction `φ = ρ - 1` in `A φ = -A 1`
/// (consistent, since constants span the kernel of `A^T`), so a constant
/// environment is solved in zero iterations.
fn solve_balance(problem: &LinearProblem, config: &SolverConfig) -> Result<SolveResult> {
    let n = problem.unknown_count();
    let ones = vec![1.0; n];
    let mut a1 = vec![0.0; n];
    problem.apply(&ones, &mut a1);
    let (rho, iterations) = match config.method {
        Method::PowerIteration => {
            let mut m = ones.clone();
            let mut am = a1.clone();
            let mut it = 0;
            while inf_norm(&am) > config.tol && it < config.max_iters {
                it += 1;
                for i in 0..n {
                    m[i] += 0.5 * am[i];
                }
                problem.apply(&m, &mut am);
            }
            (m, it)
        }
        _ => {
            let b: Vec<f64> = a1.iter().map(|v| -v).collect();
            let out = run(&Op { problem, shift: true }, &b, config.tol, config);
            (out.x.iter().map(|p| 1.0 + p).collect(), out.iterations)
        }
    };
    let total: f64 = rho.iter().sum();
    let rho: Vec<f64> = rho.iter().map(|v| v * n as f64 / total).collect();
    let mut r = vec![0.0; n];
    problem.apply(&rho, &mut r);
    let res = inf_norm(&r);
    let m: Vec<f64> = rho.iter().map(|v| v / n as f64).collect();
    Ok(SolveResult { solution: problem.to_grid(&m), residual_inf: res, iterations, converged: res <= config.tol })
}

/// Direct LU solve; reference route for small systems.
pub fn solve_dense_oracle(problem: &LinearProblem) -> Result<GridFunction> {
    let domain = problem.domain();
    if domain.len() > DENSE_LIMIT {
        return Err(Error::SizeGuard(domain.len()));
    }
    if problem.is_structurally_singular() {
        return Err(Error::SingularSystem("torus operator without mass or gauge".into()));
    }
    let n = problem.unknown_count();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        a[(r, r)] += problem.center(r);
        for (t, w) in problem.row(r) {
            if let Ok(c) = t {
                a[(r, c)] += w;
            }
        }
    }
    let mut b = DVector::from_vec(problem.effective_rhs());
    match problem.gauge() {
        Gauge::None => {}
        Gauge::ZeroMean | Gauge::UnitSum => {
            a.row_mut(0).fill(1.0);
            b[0] = if problem.gauge() == Gauge::UnitSum { 1.0 } else { 0.0 };
        }
    }
    let x = a.lu().solve(&b).ok_or_else(|| Error::SingularSystem("LU factorisation failed".into()))?;
    Ok(problem.to_grid(x.as_slice()))
}

/// Invariant density `m` of the environment chain on a torus (`Σ m = 1`).
pub fn invariant_density(env: &EnvironmentField, torus: &Arc<GridDomain>, config: &SolverConfig) -> Result<GridFunction> {
    let problem = assemble_adjoint(env, torus)?;
    let out = solve_iterative(&problem, config)?;
    if !out.converged {
        return Err(Error::NotConverged { iterations: out.iterations, residual: out.residual_inf });
    }
    Ok(out.solution)
}
