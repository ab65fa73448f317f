//! Pre-scaler design by successive convex approximation.
//!
//! The design problem trades the transmission/noise variance `ζ` against the
//! participation bias:
//!
//! ```text
//! minimize 2ηL ζ(γ, p, α) + 2Nκ² Σ (p_m - 1/N)²
//! s.t. α_m(γ_m) = α p_m,  γ_m <= γ_{m,max},  α p_m <= α_{m,max},  Σ p_m = 1
//! ```
//!
//! Each iteration solves a convex inner approximation around the current
//! anchor ([`subproblem`]), recovers an exactly coupled design from its
//! solution and re-anchors there.

pub mod barrier;
pub mod subproblem;

use serde::{Deserialize, Serialize};

use crate::bound;
use crate::channel::{self, LargeScaleGains};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::ota::{self, PowerControlDesign};
use barrier::BarrierOptions;
use subproblem::{solve_subproblem, Anchor, SubVars, Subproblem};

/// Coefficients and channel statistics of one design instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignProblem {
    pub lambda: Vec<f64>,
    pub g_max: f64,
    pub d: usize,
    pub e_s: f64,
    pub n0: f64,
    pub eta: f64,
    /// Smoothness constant `L`.
    pub smoothness: f64,
    pub kappa: f64,
    /// Per-device mini-batch deviation `σ_m`.
    pub sigma: Vec<f64>,
}

impl DesignProblem {
    pub fn new(
        lambda: Vec<f64>,
        g_max: f64,
        d: usize,
        e_s: f64,
        n0: f64,
        eta: f64,
        smoothness: f64,
        kappa: f64,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            lambda,
            g_max,
            d,
            e_s,
            n0,
            eta,
            smoothness,
            kappa,
            sigma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_network(config: &NetworkConfig, eta: f64, smoothness: f64, kappa: f64, sigma: Vec<f64>) -> Result<Self> {
        Self::new(
            config.gains.as_slice().to_vec(),
            config.g_max,
            config.d,
            config.e_s,
            config.n0,
            eta,
            smoothness,
            kappa,
            sigma,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.lambda.is_empty() {
            return Err(Error::Config("design problem needs at least one device".into()));
        }
        if let Some((m, l)) = self.lambda.iter().enumerate().find(|(_, l)| !pos(**l)) {
            return Err(Error::Config(format!("lambda[{m}] = {l} must be positive")));
        }
        if self.sigma.len() != self.lambda.len() {
            return Err(Error::Config(format!(
                "{} sigma values for {} devices",
                self.sigma.len(),
                self.lambda.len()
            )));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("sigma values must be finite and >= 0".into()));
        }
        if !(pos(self.g_max) && pos(self.e_s) && pos(self.eta) && pos(self.smoothness)) {
            return Err(Error::Config("g_max, e_s, eta and smoothness must be positive".into()));
        }
        if !(self.n0 >= 0.0 && self.n0.is_finite()) || !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config("n0 and kappa must be finite and >= 0".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        NetworkConfig::new(LargeScaleGains::new(self.lambda.clone())?, self.e_s, self.n0, self.d, self.g_max)
    }

    fn alpha_m(&self, m: usize, gamma: f64) -> Result<f64> {
        channel::alpha_m(gamma, self.lambda[m], self.g_max, self.d, self.e_s)
    }
}

/// `(γ_{m,max}, α_{m,max})` for every device.
pub fn closed_form_limits(problem: &DesignProblem) -> (Vec<f64>, Vec<f64>) {
    let g = problem
        .lambda
        .iter()
        .map(|l| channel::gamma_max(*l, problem.g_max, problem.d, problem.e_s))
        .collect();
    let a = problem
        .lambda
        .iter()
        .map(|l| channel::alpha_max(*l, problem.g_max, problem.d, problem.e_s))
        .collect();
    (g, a)
}

/// `2ηLζ + 2Nκ² Σ (p_m - 1/N)²`.
pub fn evaluate_p1(design: &PowerControlDesign, problem: &DesignProblem) -> Result<f64> {
    let z = bound::zeta_raw(
        &design.gamma,
        &design.p,
        design.alpha,
        &problem.sigma,
        problem.g_max,
        problem.d,
        problem.n0,
    )?;
    Ok(2.0 * problem.eta * problem.smoothness * z.zeta + bound::bias_term(&design.p, problem.kappa))
}

/// Smallest `γ` with `α_m(γ) = target`, searched on `[0, γ_max]`.
pub fn recover_gamma(problem: &DesignProblem, m: usize, target: f64) -> Result<f64> {
    let (gmax, amax) = (
        channel::gamma_max(problem.lambda[m], problem.g_max, problem.d, problem.e_s),
        channel::alpha_max(problem.lambda[m], problem.g_max, problem.d, problem.e_s),
    );
    if !(target > 0.0) {
        return Err(Error::Domain(format!("coupling target of device {m} must be positive, got {target}")));
    }
    if target > amax * (1.0 + 1e-9) {
        return Err(Error::Domain(format!(
            "alpha p = {target:e} exceeds alpha_max = {amax:e} for device {m}; no coupling root"
        )));
    }
    // u e^{-u²/2} = target/γ_max on u in [0, 1]
    let t = (target / gmax).min((-0.5f64).exp());
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 * hi && hi > f64::MIN_POSITIVE {
        let mid = 0.5 * (lo + hi);
        if mid * (-0.5 * mid * mid).exp() < t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi) * gmax)
}

/// Exactly coupled design with weights `p` and post-scaler `alpha`.
pub fn design_from_coupling(problem: &DesignProblem, p: &[f64], alpha: f64) -> Result<PowerControlDesign> {
    let gamma = p
        .iter()
        .enumerate()
        .map(|(m, pm)| recover_gamma(problem, m, alpha * pm))
        .collect::<Result<Vec<_>>>()?;
    ota::make_design(&gamma, &problem.network()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCertificate {
    /// `|α_m(γ_m) - α p_m|` per device.
    pub coupling_residual: Vec<f64>,
    pub simplex_residual: f64,
    pub box_violations: Vec<String>,
    /// Smallest sampled directional derivative of the surrogate at the final anchor.
    pub min_directional_derivative: f64,
    pub accepted: bool,
}

/// Residual tolerance, relative to `α_{m,max}` for the coupling.
pub const CERTIFICATE_TOL: f64 = 1e-6;

pub fn certify(problem: &DesignProblem, gamma: &[f64], p: &[f64], alpha: f64) -> Result<FeasibilityCertificate> {
    let (gmax, amax) = closed_form_limits(problem);
    let mut coupling_residual = Vec::with_capacity(p.len());
    let mut worst = 0.0f64;
    let mut box_violations = Vec::new();
    for m in 0..p.len() {
        if !(gamma[m] > 0.0) {
            box_violations.push(format!("gamma[{m}] = {} is not positive", gamma[m]));
            coupling_residual.push(f64::INFINITY);
            worst = f64::INFINITY;
            continue;
        }
        let r = (problem.alpha_m(m, gamma[m])? - alpha * p[m]).abs();
        worst = worst.max(r / amax[m]);
        coupling_residual.push(r);
        if gamma[m] > gmax[m] + 1e-9 * gmax[m].max(1.0) {
            box_violations.push(format!("gamma[{m}] = {:e} > gamma_max = {:e}", gamma[m], gmax[m]));
        }
        if alpha * p[m] > amax[m] + 1e-9 * amax[m].max(1.0) {
            box_violations.push(format!("alpha p[{m}] = {:e} > alpha_max = {:e}", alpha * p[m], amax[m]));
        }
        if p[m] < 0.0 {
            box_violations.push(format!("p[{m}] = {} < 0", p[m]));
        }
    }
    let simplex_residual = (p.iter().sum::<f64>() - 1.0).abs();
    Ok(FeasibilityCertificate {
        accepted: worst <= CERTIFICATE_TOL && simplex_residual <= CERTIFICATE_TOL && box_violations.is_empty(),
        coupling_residual,
        simplex_residual,
        box_violations,
        min_directional_derivative: f64::NAN,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub p_floor: f64,
    /// Fraction of `N min_m α_{m,max}` used for the default initial `α`.
    pub init_scale: f64,
    /// Random directions drawn for the stationarity check (0 disables it).
    pub stationarity_dirs: usize,
    pub seed: u64,
    #[serde(skip)]
    pub barrier: BarrierOptions,
}

impl Default for ScaOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-6,
            p_floor: 1e-9,
            init_scale: 0.9,
            stationarity_dirs: 1000,
            seed: 0,
            barrier: BarrierOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaState {
    pub anchor: Anchor,
    pub iterate: Option<SubVars>,
    /// P1 value at every accepted feasible point, starting with the initial anchor.
    pub objective_trace: Vec<f64>,
    pub iteration: usize,
    pub converged: bool,
    /// Subproblems whose barrier solve hit the step cap.
    pub unconverged_solves: usize,
}

impl ScaState {
    /// Zero-bias start: `p = 1/N`, `α = c N min_m α_{m,max}`, exact coupling for `γ`.
    pub fn default_init(problem: &DesignProblem, init_scale: f64) -> Result<Self> {
        if !(init_scale > 0.0 && init_scale < 1.0) {
            return Err(Error::Config(format!("init scale must be in (0, 1), got {init_scale}")));
        }
        let n = problem.n();
        let (_, amax) = closed_form_limits(problem);
        let amin = amax.iter().cloned().fold(f64::INFINITY, f64::min);
        let alpha = init_scale * n as f64 * amin;
        let p = vec![1.0 / n as f64; n];
        let design = design_from_coupling(problem, &p, alpha)?;
        Self::from_design(&design, problem)
    }

    pub fn from_design(design: &PowerControlDesign, problem: &DesignProblem) -> Result<Self> {
        Ok(Self {
            anchor: Anchor {
                gamma: design.gamma.clone(),
                p: design.p.clone(),
                alpha: design.alpha,
            },
            iterate: None,
            objective_trace: vec![evaluate_p1(design, problem)?],
            iteration: 0,
            converged: false,
            unconverged_solves: 0,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaOutcome {
    pub design: PowerControlDesign,
    pub state: ScaState,
    pub certificate: FeasibilityCertificate,
}

/// Monotonicity slack on the P1 trace.
const TRACE_TOL: f64 = 1e-8;

pub fn sca_loop(problem: &DesignProblem, init: Option<ScaState>, opts: &ScaOptions) -> Result<ScaOutcome> {
    problem.validate()?;
    let mut state = match init {
        Some(s) => s,
        None => ScaState::default_init(problem, opts.init_scale)?,
    };
    let mut design = design_from_coupling(problem, &state.anchor.p, state.anchor.alpha)?;
    let mut cert = certify(problem, &design.gamma, &state.anchor.p, state.anchor.alpha)?;
    while state.iteration < opts.max_iters {
        let sub = Subproblem::new(problem, state.anchor.clone(), opts.p_floor)?;
        let sol = solve_subproblem(&sub, &opts.barrier)?;
        if !sol.converged {
            state.unconverged_solves += 1;
            log::warn!("subproblem {} hit the Newton step cap (gap {:e})", state.iteration, sol.gap);
        }
        let total: f64 = sol.vars.p.iter().sum();
        let p: Vec<f64> = sol.vars.p.iter().map(|v| v / total).collect();
        let candidate = design_from_coupling(problem, &p, sol.vars.alpha)?;
        let value = evaluate_p1(&candidate, problem)?;
        let prev = *state.objective_trace.last().expect("trace starts non-empty");
        if value > prev + TRACE_TOL * prev.abs().max(1.0) {
            log::warn!("SCA step {} increased P1 from {prev:e} to {value:e}; stopping", state.iteration);
            state.converged = true;
            break;
        }
        cert = certify(problem, &candidate.gamma, &p, sol.vars.alpha)?;
        state.anchor = Anchor {
            gamma: candidate.gamma.clone(),
            p: candidate.p.clone(),
            alpha: candidate.alpha,
        };
        state.iterate = Some(sol.vars);
        state.objective_trace.push(value.min(prev));
        state.iteration += 1;
        design = candidate;
        if prev - value <= opts.rel_tol * prev.abs() {
            state.converged = true;
            break;
        }
    }
    if opts.stationarity_dirs > 0 {
        let sub = Subproblem::new(problem, state.anchor.clone(), opts.p_floor)?;
        cert.min_directional_derivative = sub.min_directional_derivative(opts.stationarity_dirs, opts.seed).0;
    }
    Ok(ScaOutcome {
        design,
        state,
        certificate: cert,
    })
}
