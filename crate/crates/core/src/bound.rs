//! Finite-time stationarity bound for biased OTA-FL.
//!
//! ```text
//! (1/T) Σ_t E‖∇F(w_t)‖² <= 4 max_m (f_m(w_0) - f_m^inf) / (η T)
//!                          + 2 η L ζ
//!                          + 2 N κ² Σ_m (p_m - 1/N)²
//! ζ = G² Σ_m (p_m γ_m / α - p_m²) + Σ_m p_m² σ_m² + d N0 / α²
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{self, LocalDataset, ModelParams, ObjectiveSpec};
use crate::network::NetworkConfig;
use crate::ota::PowerControlDesign;

/// Lower bound used for every local objective (cross-entropy plus an L2 penalty is nonnegative).
pub const F_INF: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaComponents {
    /// `Σ_m (p_m γ_m / α - p_m²)`, before the `G²` factor.
    pub transmission_variance: f64,
    pub minibatch_variance: f64,
    pub receiver_noise: f64,
    pub zeta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub transmission_variance: f64,
    pub minibatch_variance: f64,
    pub receiver_noise: f64,
    pub zeta: f64,
    pub bias_term: f64,
    pub init_term: f64,
    pub total_bound: f64,
}

impl BoundReport {
    pub fn assemble(z: ZetaComponents, bias_term: f64, init_term: f64, eta: f64, smoothness: f64) -> Self {
        Self {
            transmission_variance: z.transmission_variance,
            minibatch_variance: z.minibatch_variance,
            receiver_noise: z.receiver_noise,
            zeta: z.zeta,
            bias_term,
            init_term,
            total_bound: init_term + 2.0 * eta * smoothness * z.zeta + bias_term,
        }
    }
}

/// Raw form of ζ on explicit `(γ, p, α)`.
pub fn zeta_raw(gamma: &[f64], p: &[f64], alpha: f64, sigma: &[f64], g_max: f64, d: usize, n0: f64) -> Result<ZetaComponents> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("post-scaler must be positive, got {alpha}")));
    }
    if gamma.len() != p.len() || sigma.len() != p.len() {
        return Err(Error::Domain("gamma, p and sigma lengths differ".into()));
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Domain("mini-batch deviations must be >= 0".into()));
    }
    let transmission_variance: f64 = gamma
        .iter()
        .zip(p)
        .map(|(g, pm)| pm * g / alpha - pm * pm)
        .sum();
    let minibatch_variance: f64 = p.iter().zip(sigma).map(|(pm, s)| pm * pm * s * s).sum();
    let receiver_noise = d as f64 * n0 / (alpha * alpha);
    Ok(ZetaComponents {
        transmission_variance,
        minibatch_variance,
        receiver_noise,
        zeta: g_max * g_max * transmission_variance + minibatch_variance + receiver_noise,
    })
}

pub fn zeta(design: &PowerControlDesign, sigma: &[f64], config: &NetworkConfig) -> Result<ZetaComponents> {
    zeta_raw(&design.gamma, &design.p, design.alpha, sigma, config.g_max, config.d, config.n0)
}

/// `2 N κ² Σ_m (p_m - 1/N)²`
pub fn bias_term(p: &[f64], kappa: f64) -> f64 {
    let n = p.len() as f64;
    2.0 * n * kappa * kappa * p.iter().map(|pm| (pm - 1.0 / n).powi(2)).sum::<f64>()
}

/// `4 max_m (f_m(w_0) - f_inf) / (η T)` from precomputed local losses.
pub fn init_term_from_losses(local_losses: &[f64], eta: f64, t_rounds: usize) -> Result<f64> {
    if !(eta > 0.0) || t_rounds == 0 {
        return Err(Error::Domain(format!("need eta > 0 and T >= 1, got {eta}, {t_rounds}")));
    }
    let gap = local_losses
        .iter()
        .map(|f| f - F_INF)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(4.0 * gap / (eta * t_rounds as f64))
}

pub fn init_term(
    spec: &ObjectiveSpec,
    w0: &ModelParams,
    datasets: &[LocalDataset],
    eta: f64,
    t_rounds: usize,
) -> Result<f64> {
    let losses = datasets
        .iter()
        .map(|ds| learner::full_loss_and_grad(spec, w0, ds).map(|(f, _)| f))
        .collect::<Result<Vec<_>>>()?;
    init_term_from_losses(&losses, eta, t_rounds)
}

/// `(1/T) Σ_t ‖∇F(w_t)‖²`
pub fn stationarity_metric(trace: &[Vec<f64>]) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Domain("empty gradient trace".into()));
    }
    Ok(trace.iter().map(|g| crate::linalg::norm_sq(g)).sum::<f64>() / trace.len() as f64)
}
