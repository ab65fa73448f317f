//! Primal log-barrier interior-point method for small dense convex programs
//!
//! ```text
//! minimize f0(x)  subject to  f_i(x) <= 0,  A x = b
//! ```
//!
//! Each centering step runs equality-constrained Newton on
//! `t f0(x) - Σ ln(-f_i(x))` with backtracking line search; `t` grows by a
//! constant factor per stage until the duality-gap surrogate `m / t` drops
//! below tolerance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Value and derivatives of one inequality `f(x) <= 0`. Hessians are diagonal.
#[derive(Debug, Clone, Default)]
pub struct ConstraintEval {
    pub value: f64,
    pub grad: Vec<(usize, f64)>,
    pub hess_diag: Vec<(usize, f64)>,
}

pub trait ConvexProgram {
    fn dim(&self) -> usize;
    /// Open domain of the functions (e.g. arguments of logarithms positive).
    fn in_domain(&self, x: &[f64]) -> bool;
    fn objective(&self, x: &[f64]) -> f64;
    fn objective_grad(&self, x: &[f64]) -> Vec<f64>;
    fn objective_hess_diag(&self, x: &[f64]) -> Vec<f64>;
    fn constraint_values(&self, x: &[f64]) -> Vec<f64>;
    fn constraints(&self, x: &[f64]) -> Vec<ConstraintEval>;
    /// Rows of `A x = b` as `(dense row, rhs)`.
    fn equalities(&self) -> Vec<(Vec<f64>, f64)>;
    fn constraint_name(&self, i: usize) -> String {
        format!("constraint {i}")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    pub mu0: f64,
    pub mu_factor: f64,
    /// Relative duality-gap tolerance.
    pub tol: f64,
    pub max_newton_steps: usize,
    pub armijo: f64,
    pub backtrack: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            mu_factor: 10.0,
            tol: 1e-8,
            max_newton_steps: 200,
            armijo: 0.3,
            backtrack: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub gap: f64,
    pub newton_steps: usize,
    pub converged: bool,
}

fn strictly_feasible<P: ConvexProgram + ?Sized>(prog: &P, x: &[f64]) -> bool {
    prog.in_domain(x) && prog.constraint_values(x).iter().all(|v| *v < 0.0)
}

fn barrier_value<P: ConvexProgram + ?Sized>(prog: &P, x: &[f64], t: f64) -> f64 {
    if !prog.in_domain(x) {
        return f64::INFINITY;
    }
    let mut phi = t * prog.objective(x);
    for v in prog.constraint_values(x) {
        if v >= 0.0 {
            return f64::INFINITY;
        }
        phi -= (-v).ln();
    }
    phi
}

/// Minimizes `prog` from the strictly feasible point `x0`.
pub fn solve<P: ConvexProgram + ?Sized>(prog: &P, x0: &[f64], opts: &BarrierOptions) -> Result<BarrierResult> {
    let n = prog.dim();
    if x0.len() != n {
        return Err(Error::Solver(format!("start has {} entries, expected {n}", x0.len())));
    }
    if !prog.in_domain(x0) {
        return Err(Error::Infeasible("start point outside the domain".into()));
    }
    let violated: Vec<String> = prog
        .constraint_values(x0)
        .iter()
        .enumerate()
        .filter(|(_, v)| !(**v < 0.0))
        .map(|(i, v)| format!("{} = {v:e}", prog.constraint_name(i)))
        .collect();
    if !violated.is_empty() {
        return Err(Error::Infeasible(format!(
            "start point not strictly feasible: {}",
            violated.join(", ")
        )));
    }
    let eqs = prog.equalities();
    let p = eqs.len();
    let m = prog.constraint_values(x0).len() as f64;

    let mut x = x0.to_vec();
    let mut t = 1.0 / opts.mu0;
    let mut steps = 0usize;
    let mut converged = false;
    loop {
        // centering
        loop {
            if steps >= opts.max_newton_steps {
                break;
            }
            steps += 1;
            let mut grad = DVector::from_vec(prog.objective_grad(&x)) * t;
            let mut hess = DMatrix::from_diagonal(&DVector::from_vec(prog.objective_hess_diag(&x))) * t;
            for c in prog.constraints(&x) {
                let s = -c.value;
                let inv = 1.0 / s;
                for &(i, gi) in &c.grad {
                    grad[i] += gi * inv;
                    for &(j, gj) in &c.grad {
                        hess[(i, j)] += gi * gj * inv * inv;
                    }
                }
                for &(i, hi) in &c.hess_diag {
                    hess[(i, i)] += hi * inv;
                }
            }
            let mut kkt = DMatrix::zeros(n + p, n + p);
            kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
            let mut rhs = DVector::zeros(n + p);
            for i in 0..n {
                rhs[i] = -grad[i];
            }
            for (r, (row, b)) in eqs.iter().enumerate() {
                let mut ax = 0.0;
                for (j, a) in row.iter().enumerate() {
                    kkt[(n + r, j)] = *a;
                    kkt[(j, n + r)] = *a;
                    ax += a * x[j];
                }
                rhs[n + r] = b - ax;
            }
            let sol = match kkt.clone().lu().solve(&rhs) {
                Some(s) => s,
                None => return Err(Error::Solver("singular KKT system".into())),
            };
            let dx: Vec<f64> = sol.iter().take(n).cloned().collect();
            let slope: f64 = grad.iter().zip(&dx).map(|(g, d)| g * d).sum();
            let decrement = -slope;
            if !decrement.is_finite() {
                return Err(Error::Solver("non-finite Newton decrement".into()));
            }
            if decrement / 2.0 <= 1e-10 {
                break;
            }
            let phi = barrier_value(prog, &x, t);
            let mut step = 1.0;
            let trial = |s: f64| -> Vec<f64> { x.iter().zip(&dx).map(|(a, d)| a + s * d).collect() };
            let mut candidate = trial(step);
            while !strictly_feasible(prog, &candidate) && step > 1e-20 {
                step *= opts.backtrack;
                candidate = trial(step);
            }
            let slack = 1e-13 * phi.abs().max(1.0);
            while barrier_value(prog, &candidate, t) > phi + opts.armijo * step * slope + slack && step > 1e-20 {
                step *= opts.backtrack;
                candidate = trial(step);
            }
            if step <= 1e-20 || !strictly_feasible(prog, &candidate) {
                break;
            }
            x = candidate;
        }
        let f = prog.objective(&x);
        let gap = m / t;
        if gap <= opts.tol * f.abs().max(1.0) {
            converged = true;
        }
        if converged || steps >= opts.max_newton_steps {
            return Ok(BarrierResult {
                objective: f,
                gap,
                x,
                newton_steps: steps,
                converged,
            });
        }
        t *= opts.mu_factor;
    }
}
