//! Convex inner approximation of the pre-scaler design problem around an anchor.
//!
//! Variables are `(γ_m, p_m, z_m, α)`; `z_m` is an epigraph variable for
//! `p_m γ_m / α`. Inside the solver `γ_m` is measured in units of `γ_{m,max}`
//! and `α` in units of `Σ_m α_{m,max}`, which keeps every coordinate O(1)
//! regardless of the path-loss scale. Constraints per device:
//!
//! ```text
//! ln(γ̄ p̄) + γ/γ̄ + p/p̄ - 2 <= ln z + ln α
//! ln(ᾱ p̄) + α/ᾱ + p/p̄ - 2 <= ln γ - γ² G² / (d Λ E_s)
//! γ <= γ_max,   p / α_max <= (2ᾱ - α) / ᾱ²,   p >= floor
//! Σ p = 1
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::barrier::{self, BarrierOptions, ConstraintEval, ConvexProgram};
use super::DesignProblem;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Linearization point `(γ̄, p̄, ᾱ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub gamma: Vec<f64>,
    pub p: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubVars {
    pub gamma: Vec<f64>,
    pub p: Vec<f64>,
    pub z: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct Subproblem {
    n: usize,
    anchor: Anchor,
    gamma_max: Vec<f64>,
    alpha_max: Vec<f64>,
    alpha_ref: f64,
    /// `γ_max / α_ref`
    rho: Vec<f64>,
    /// `α_max / α_ref`
    r: Vec<f64>,
    u_bar: Vec<f64>,
    a_bar: f64,
    noise_coeff: f64,
    eta_l: f64,
    g2: f64,
    sigma2: Vec<f64>,
    n_kappa2: f64,
    p_floor: f64,
}

#[derive(Debug, Clone)]
pub struct SubSolution {
    pub vars: SubVars,
    pub objective: f64,
    pub gap: f64,
    pub newton_steps: usize,
    pub converged: bool,
}

/// Shrink applied to `ᾱ` for the strictly feasible starting point.
const START_SHRINK: f64 = 1e-4;

impl Subproblem {
    /// Builds the surrogate program. `p_floor` is the positivity floor on `p_m`;
    /// it is lowered below the smallest anchor weight when needed.
    pub fn new(problem: &DesignProblem, anchor: Anchor, p_floor: f64) -> Result<Self> {
        let n = problem.n();
        if anchor.gamma.len() != n || anchor.p.len() != n {
            return Err(Error::Domain("anchor size does not match the problem".into()));
        }
        let (gamma_max, alpha_max) = super::closed_form_limits(problem);
        if !(anchor.alpha > 0.0 && anchor.alpha.is_finite()) {
            return Err(Error::Domain(format!("anchor post-scaler {} is not positive", anchor.alpha)));
        }
        for m in 0..n {
            let (g, p) = (anchor.gamma[m], anchor.p[m]);
            if !(g > 0.0 && p > 0.0) {
                return Err(Error::Domain(format!(
                    "anchor of device {m} is on the boundary (gamma {g}, p {p})"
                )));
            }
            if g > gamma_max[m] * (1.0 + 1e-12) {
                return Err(Error::Domain(format!("anchor gamma of device {m} exceeds gamma_max")));
            }
            if anchor.alpha * p > alpha_max[m] * (1.0 + 1e-12) {
                return Err(Error::Domain(format!("anchor violates alpha p <= alpha_max for device {m}")));
            }
        }
        let alpha_ref: f64 = alpha_max.iter().sum();
        let min_p = anchor.p.iter().cloned().fold(f64::INFINITY, f64::min);
        let u_bar: Vec<f64> = anchor.gamma.iter().zip(&gamma_max).map(|(g, gm)| g / gm).collect();
        Ok(Self {
            n,
            rho: gamma_max.iter().map(|g| g / alpha_ref).collect(),
            r: alpha_max.iter().map(|a| a / alpha_ref).collect(),
            u_bar,
            a_bar: anchor.alpha / alpha_ref,
            noise_coeff: problem.d as f64 * problem.n0 / (alpha_ref * alpha_ref),
            eta_l: problem.eta * problem.smoothness,
            g2: problem.g_max * problem.g_max,
            sigma2: problem.sigma.iter().map(|s| s * s).collect(),
            n_kappa2: n as f64 * problem.kappa * problem.kappa,
            p_floor: p_floor.min(0.5 * min_p),
            gamma_max,
            alpha_max,
            alpha_ref,
            anchor,
        })
    }

    pub fn anchor(&self) -> &Anchor {
        &self.anchor
    }

    pub fn p_floor(&self) -> f64 {
        self.p_floor
    }

    fn iu(&self, m: usize) -> usize {
        m
    }
    fn ip(&self, m: usize) -> usize {
        self.n + m
    }
    fn iz(&self, m: usize) -> usize {
        2 * self.n + m
    }
    fn ia(&self) -> usize {
        3 * self.n
    }

    pub fn to_scaled(&self, v: &SubVars) -> Vec<f64> {
        let mut x = Vec::with_capacity(3 * self.n + 1);
        x.extend(v.gamma.iter().zip(&self.gamma_max).map(|(g, gm)| g / gm));
        x.extend(&v.p);
        x.extend(&v.z);
        x.push(v.alpha / self.alpha_ref);
        x
    }

    pub fn from_scaled(&self, x: &[f64]) -> SubVars {
        let n = self.n;
        SubVars {
            gamma: x[..n].iter().zip(&self.gamma_max).map(|(u, gm)| u * gm).collect(),
            p: x[n..2 * n].to_vec(),
            z: x[2 * n..3 * n].to_vec(),
            alpha: x[3 * n] * self.alpha_ref,
        }
    }

    /// The anchor with `z_m = γ̄_m p̄_m / ᾱ`, where every surrogate is tight.
    pub fn anchor_point(&self) -> SubVars {
        let a = &self.anchor;
        SubVars {
            gamma: a.gamma.clone(),
            p: a.p.clone(),
            z: a.gamma.iter().zip(&a.p).map(|(g, p)| g * p / a.alpha).collect(),
            alpha: a.alpha,
        }
    }

    /// Strictly feasible start near the anchor.
    pub fn start_point(&self) -> Vec<f64> {
        let n = self.n;
        let a = self.a_bar * (1.0 - START_SHRINK);
        let mut x = vec![0.0; 3 * n + 1];
        for m in 0..n {
            let u = self.u_bar[m].min(1.0 - 1e-9);
            let p = self.anchor.p[m];
            x[self.iu(m)] = u;
            x[self.ip(m)] = p;
            x[self.iz(m)] = u * p * self.rho[m] / a * (1.0 + 1e-3);
        }
        x[self.ia()] = a;
        x
    }

    /// Surrogate objective:
    /// `ηL(G² Σ z + d N0/α² + Σ p²σ² - G² Σ p̄(2p - p̄)) + Nκ² Σ (p - 1/N)²`.
    pub fn objective_value(&self, v: &SubVars) -> f64 {
        self.objective(&self.to_scaled(v))
    }

    /// Surrogate constraint values `[epigraph_m.., coupling_m.., alpha_bound_m..]` in physical units.
    pub fn surrogate_constraints(&self, problem: &DesignProblem, v: &SubVars) -> Vec<f64> {
        let a = &self.anchor;
        let mut out = Vec::with_capacity(3 * self.n);
        for m in 0..self.n {
            out.push(
                (a.gamma[m] * a.p[m]).ln() + v.gamma[m] / a.gamma[m] + v.p[m] / a.p[m] - 2.0
                    - v.z[m].ln()
                    - v.alpha.ln(),
            );
        }
        for m in 0..self.n {
            let c = problem.g_max * problem.g_max / (problem.d as f64 * problem.lambda[m] * problem.e_s);
            out.push(
                (a.alpha * a.p[m]).ln() + v.alpha / a.alpha + v.p[m] / a.p[m] - 2.0 - v.gamma[m].ln()
                    + c * v.gamma[m] * v.gamma[m],
            );
        }
        for m in 0..self.n {
            out.push(v.p[m] / self.alpha_max[m] - (2.0 * a.alpha - v.alpha) / (a.alpha * a.alpha));
        }
        out
    }

    /// The constraints the surrogates approximate, same layout as
    /// [`Self::surrogate_constraints`]: `z >= pγ/α`, `αp <= α_m(γ)`, `p/α_max <= 1/α`.
    pub fn original_constraints(&self, problem: &DesignProblem, v: &SubVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.n);
        for m in 0..self.n {
            out.push((v.gamma[m] * v.p[m]).ln() - v.z[m].ln() - v.alpha.ln());
        }
        for m in 0..self.n {
            let c = problem.g_max * problem.g_max / (problem.d as f64 * problem.lambda[m] * problem.e_s);
            out.push((v.alpha * v.p[m]).ln() - v.gamma[m].ln() + c * v.gamma[m] * v.gamma[m]);
        }
        for m in 0..self.n {
            out.push(v.p[m] / self.alpha_max[m] - 1.0 / v.alpha);
        }
        out
    }

    /// Smallest normalized directional derivative of the surrogate objective at
    /// the anchor over `n_dirs` random directions of the linearized feasible cone.
    /// Returns `(min derivative, accepted directions)`.
    pub fn min_directional_derivative(&self, n_dirs: usize, seed: u64) -> (f64, usize) {
        let n = self.n;
        let x0 = self.to_scaled(&self.anchor_point());
        let grad = self.objective_grad(&x0);
        let mut rng = stream(seed, 0, 0, Purpose::Search);
        let mut worst = f64::INFINITY;
        let mut accepted = 0;
        let mut tries = 0;
        while accepted < n_dirs && tries < 100 * n_dirs {
            tries += 1;
            let mut dx = vec![0.0; 3 * n + 1];
            let mut dp: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let mean = dp.iter().sum::<f64>() / n as f64;
            dp.iter_mut().for_each(|v| *v -= mean);
            let da = rng.random::<f64>() - 0.5;
            dx[self.ia()] = da;
            let mut ok = true;
            for m in 0..n {
                let (u, p) = (self.u_bar[m], self.anchor.p[m]);
                dx[self.ip(m)] = dp[m];
                // coupling linearized: da/ā + dp/p̄ + (u - 1/u) du <= 0
                let need = da / self.a_bar + dp[m] / p;
                let du = need / (1.0 / u - u) + 0.1 * rng.random::<f64>();
                if 1.0 - u < 1e-7 && du > 0.0 {
                    ok = false;
                }
                // epigraph linearized with equality in z
                let z = u * p * self.rho[m] / self.a_bar;
                let dz = z * (du / u + dp[m] / p - da / self.a_bar);
                dx[self.iu(m)] = du;
                dx[self.iz(m)] = dz;
                let d_slack = (2.0 * self.a_bar - self.a_bar) / (self.a_bar * self.a_bar) - p / self.r[m];
                if d_slack < 1e-9 && dp[m] / self.r[m] + da / (self.a_bar * self.a_bar) > 0.0 {
                    ok = false;
                }
                if p - self.p_floor < 1e-12 && dp[m] < 0.0 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let norm = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dd: f64 = grad.iter().zip(&dx).map(|(g, d)| g * d).sum::<f64>() / norm;
            worst = worst.min(dd);
            accepted += 1;
        }
        (worst, accepted)
    }
}

impl ConvexProgram for Subproblem {
    fn dim(&self) -> usize {
        3 * self.n + 1
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        let n = self.n;
        x.iter().all(|v| v.is_finite())
            && x[..n].iter().all(|u| *u > 0.0)
            && x[2 * n..3 * n].iter().all(|z| *z > 0.0)
            && x[3 * n] > 0.0
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let inv_n = 1.0 / n as f64;
        let a = x[self.ia()];
        let mut inner = self.noise_coeff / (a * a);
        let mut bias = 0.0;
        for m in 0..n {
            let p = x[self.ip(m)];
            let pb = self.anchor.p[m];
            inner += self.g2 * x[self.iz(m)] + self.sigma2[m] * p * p - self.g2 * pb * (2.0 * p - pb);
            bias += (p - inv_n).powi(2);
        }
        self.eta_l * inner + self.n_kappa2 * bias
    }

    fn objective_grad(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let inv_n = 1.0 / n as f64;
        let mut g = vec![0.0; self.dim()];
        for m in 0..n {
            let p = x[self.ip(m)];
            g[self.ip(m)] = self.eta_l * (2.0 * self.sigma2[m] * p - 2.0 * self.g2 * self.anchor.p[m])
                + 2.0 * self.n_kappa2 * (p - inv_n);
            g[self.iz(m)] = self.eta_l * self.g2;
        }
        let a = x[self.ia()];
        g[self.ia()] = -2.0 * self.eta_l * self.noise_coeff / (a * a * a);
        g
    }

    fn objective_hess_diag(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim()];
        for m in 0..self.n {
            h[self.ip(m)] = 2.0 * self.eta_l * self.sigma2[m] + 2.0 * self.n_kappa2;
        }
        let a = x[self.ia()];
        h[self.ia()] = 6.0 * self.eta_l * self.noise_coeff / (a * a * a * a);
        h
    }

    fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.constraints(x).into_iter().map(|c| c.value).collect()
    }

    fn constraints(&self, x: &[f64]) -> Vec<ConstraintEval> {
        let n = self.n;
        let a = x[self.ia()];
        let ab = self.a_bar;
        let mut out = Vec::with_capacity(5 * n);
        for m in 0..n {
            let (u, p, z) = (x[self.iu(m)], x[self.ip(m)], x[self.iz(m)]);
            let (ub, pb) = (self.u_bar[m], self.anchor.p[m]);
            out.push(ConstraintEval {
                value: (ub * pb * self.rho[m]).ln() + u / ub + p / pb - 2.0 - z.ln() - a.ln(),
                grad: vec![
                    (self.iu(m), 1.0 / ub),
                    (self.ip(m), 1.0 / pb),
                    (self.iz(m), -1.0 / z),
                    (self.ia(), -1.0 / a),
                ],
                hess_diag: vec![(self.iz(m), 1.0 / (z * z)), (self.ia(), 1.0 / (a * a))],
            });
        }
        for m in 0..n {
            let (u, p) = (x[self.iu(m)], x[self.ip(m)]);
            let pb = self.anchor.p[m];
            out.push(ConstraintEval {
                value: (ab * pb / self.rho[m]).ln() + a / ab + p / pb - 2.0 - u.ln() + 0.5 * u * u,
                grad: vec![
                    (self.ia(), 1.0 / ab),
                    (self.ip(m), 1.0 / pb),
                    (self.iu(m), u - 1.0 / u),
                ],
                hess_diag: vec![(self.iu(m), 1.0 / (u * u) + 1.0)],
            });
        }
        for m in 0..n {
            out.push(ConstraintEval {
                value: x[self.iu(m)] - 1.0,
                grad: vec![(self.iu(m), 1.0)],
                hess_diag: vec![],
            });
        }
        for m in 0..n {
            out.push(ConstraintEval {
                value: x[self.ip(m)] / self.r[m] - (2.0 * ab - a) / (ab * ab),
                grad: vec![(self.ip(m), 1.0 / self.r[m]), (self.ia(), 1.0 / (ab * ab))],
                hess_diag: vec![],
            });
        }
        for m in 0..n {
            out.push(ConstraintEval {
                value: self.p_floor - x[self.ip(m)],
                grad: vec![(self.ip(m), -1.0)],
                hess_diag: vec![],
            });
        }
        out
    }

    fn equalities(&self) -> Vec<(Vec<f64>, f64)> {
        let mut row = vec![0.0; self.dim()];
        for m in 0..self.n {
            row[self.ip(m)] = 1.0;
        }
        vec![(row, 1.0)]
    }

    fn constraint_name(&self, i: usize) -> String {
        let kinds = ["epigraph", "coupling", "gamma_max", "alpha_bound", "p_floor"];
        format!("{}[{}]", kinds[i / self.n], i % self.n)
    }
}

/// Solves the surrogate from the strictly feasible point next to its anchor.
pub fn solve_subproblem(sub: &Subproblem, opts: &BarrierOptions) -> Result<SubSolution> {
    let res = barrier::solve(sub, &sub.start_point(), opts)?;
    Ok(SubSolution {
        vars: sub.from_scaled(&res.x),
        objective: res.objective,
        gap: res.gap,
        newton_steps: res.newton_steps,
        converged: res.converged,
    })
}
