//! Comparison schemes: instantaneous-CSI channel inversion (vanilla and
//! MSE-optimal), a common statistical-CSI pre-scaler, distance-based
//! scheduling, and the noiseless FedAvg ceiling.
//!
//! The MSE-optimal and common-pre-scaler schemes are reconstructions from
//! one-line behavioral descriptions and are labeled as surrogates in reports.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bound;
use crate::error::{Error, Result};
use crate::learner::{self, LocalDataset, ModelParams, ObjectiveSpec};
use crate::network::NetworkConfig;
use crate::ota::{self, GradientEstimate, PowerControlDesign};
use crate::rng::{stream, Purpose};

/// Per-round decision of an instantaneous-CSI policy. Device `m` sends
/// `tx_scale[m] · g_m`; after the channel its contribution is `gain[m] · g_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub tx_scale: Vec<Complex64>,
    pub gain: Vec<f64>,
    pub post_scaler: f64,
    pub participation_mask: Vec<bool>,
}

impl PolicyDecision {
    fn silent(n: usize) -> Self {
        Self {
            tx_scale: vec![Complex64::new(0.0, 0.0); n],
            gain: vec![0.0; n],
            post_scaler: 1.0,
            participation_mask: vec![false; n],
        }
    }

    fn from_gains(gain: Vec<f64>, h: &[Complex64], post_scaler: f64) -> Self {
        let participation_mask: Vec<bool> = gain.iter().map(|c| *c > 0.0).collect();
        let tx_scale = gain
            .iter()
            .zip(h)
            .map(|(c, h)| if *c > 0.0 { Complex64::new(*c, 0.0) / h } else { Complex64::new(0.0, 0.0) })
            .collect();
        Self {
            tx_scale,
            gain,
            post_scaler,
            participation_mask,
        }
    }

    /// Worst-case per-sample energy of device `m` (gradient norm `G_max`).
    pub fn worst_case_energy(&self, m: usize, config: &NetworkConfig) -> f64 {
        self.tx_scale[m].norm_sqr() * config.g_max * config.g_max / config.d as f64
    }
}

/// Zero-bias channel inversion limited by the weakest device.
pub fn vanilla_ota(h: &[Complex64], config: &NetworkConfig) -> PolicyDecision {
    let n = h.len();
    let weakest = h.iter().map(|h| h.norm()).fold(f64::INFINITY, f64::min);
    if !(weakest > 0.0) {
        return PolicyDecision::silent(n);
    }
    let eta_t = config.max_amplitude(weakest);
    PolicyDecision::from_gains(vec![eta_t; n], h, n as f64 * eta_t)
}

/// `G² Σ (c_m/α - 1/N)² + E‖z‖²/α²`: worst-case aggregation MSE of a decision.
pub fn decision_mse(gain: &[f64], post_scaler: f64, config: &NetworkConfig) -> f64 {
    let n = gain.len() as f64;
    let g2 = config.g_max * config.g_max;
    let bias: f64 = gain.iter().map(|c| (c / post_scaler - 1.0 / n).powi(2)).sum();
    g2 * bias + config.noise().real_energy() / (post_scaler * post_scaler)
}

/// Per-round MSE-minimizing inversion: strong devices invert to the common
/// target `α/N`, weak ones transmit at full energy.
pub fn opc_ota(h: &[Complex64], config: &NetworkConfig) -> PolicyDecision {
    let n = h.len();
    let nf = n as f64;
    let beta: Vec<f64> = h.iter().map(|h| config.max_amplitude(h.norm())).collect();
    if beta.iter().all(|b| !(*b > 0.0)) {
        return PolicyDecision::silent(n);
    }
    let mut sorted = beta.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let g2 = config.g_max * config.g_max;
    let noise = config.noise().real_energy();
    // x = 1/α; with the k weakest devices at full energy the MSE is
    // G² Σ_{i<k} (β_i x - 1/N)² + noise x² on x in [1/(N β_k), 1/(N β_{k-1})].
    let mse = |x: f64| -> f64 {
        let bias: f64 = sorted.iter().map(|b| ((b * x).min(1.0 / nf) - 1.0 / nf).powi(2)).sum();
        g2 * bias + noise * x * x
    };
    let mut best = (f64::INFINITY, f64::NAN);
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in 0..=n {
        if k > 0 {
            s1 += sorted[k - 1];
            s2 += sorted[k - 1] * sorted[k - 1];
        }
        let lo = if k < n { 1.0 / (nf * sorted[k]) } else { 0.0 };
        let hi = if k > 0 && sorted[k - 1] > 0.0 { 1.0 / (nf * sorted[k - 1]) } else { f64::INFINITY };
        if !(lo <= hi) || !lo.is_finite() && !hi.is_finite() {
            continue;
        }
        let denom = g2 * s2 + noise;
        let free = if denom > 0.0 { g2 * s1 / nf / denom } else { f64::INFINITY };
        let x = free.clamp(lo, hi);
        if !(x > 0.0 && x.is_finite()) {
            continue;
        }
        let v = mse(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    let alpha = 1.0 / best.1;
    let gain = beta.iter().map(|b| (alpha / nf).min(*b)).collect();
    PolicyDecision::from_gains(gain, h, alpha)
}

/// Applies an instantaneous-CSI decision: `ĝ = (Σ_m c_m g_m + z) / post_scaler`.
pub fn apply_decision(
    local_grads: &[Vec<f64>],
    decision: &PolicyDecision,
    config: &NetworkConfig,
    noise: &[Complex64],
) -> Result<GradientEstimate> {
    ota::check_gradients(local_grads, config)?;
    if decision.gain.len() != config.n_devices() {
        return Err(Error::Contract("decision and network disagree on N".into()));
    }
    if cfg!(debug_assertions) {
        for m in 0..config.n_devices() {
            let e = decision.worst_case_energy(m, config);
            debug_assert!(e <= config.e_s * (1.0 + 1e-9), "device {m} exceeds the energy budget: {e}");
        }
    }
    let mut signal_part = vec![0.0; config.d];
    for (g, c) in local_grads.iter().zip(&decision.gain) {
        if *c > 0.0 {
            let s = c / decision.post_scaler;
            signal_part.iter_mut().zip(g).for_each(|(a, g)| *a += s * g);
        }
    }
    let noise_part = ota::noise_vector(noise, config.d, decision.post_scaler)?;
    Ok(GradientEstimate {
        g_hat: signal_part.iter().zip(&noise_part).map(|(s, z)| s + z).collect(),
        active_mask: decision.participation_mask.clone(),
        signal_part,
        noise_part,
    })
}

/// Common pre-scaler minimizing `ζ` (bias excluded) from statistical CSI.
pub fn lcpc(config: &NetworkConfig, sigma: &[f64]) -> Result<PowerControlDesign> {
    let n = config.n_devices();
    let top = (0..n).map(|m| config.gamma_max(m)).fold(0.0, f64::max);
    let zeta_at = |gamma: f64| -> f64 {
        ota::make_design(&vec![gamma; n], config)
            .and_then(|d| bound::zeta(&d, sigma, config))
            .map(|z| z.zeta)
            .unwrap_or(f64::INFINITY)
    };
    // coarse logarithmic scan, then golden section on the bracketing cell
    let points = 200;
    let lo_exp = -8.0f64;
    let grid: Vec<f64> = (0..=points)
        .map(|i| top * 10f64.powf(lo_exp * (1.0 - i as f64 / points as f64)))
        .collect();
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(i, g)| (i, zeta_at(*g)))
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(points)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (zeta_at(c), zeta_at(d));
    while b - a > 1e-9 * top {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = zeta_at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = zeta_at(d);
        }
    }
    let gamma = [0.5 * (a + b), grid[best]]
        .into_iter()
        .min_by(|x, y| zeta_at(*x).total_cmp(&zeta_at(*y)))
        .expect("two candidates");
    ota::make_design(&vec![gamma; n], config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BbflPolicy {
    Interior,
    Alternative,
}

/// Distance-based scheduler. `p_full` is the probability that the alternating
/// policy schedules every device in a given round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbflScheduler {
    pub r_in: f64,
    pub p_full: f64,
    pub seed: u64,
}

impl BbflScheduler {
    pub fn interior(&self, distances: &[f64]) -> Vec<usize> {
        let inner: Vec<usize> = (0..distances.len()).filter(|&m| distances[m] <= self.r_in).collect();
        if inner.is_empty() {
            log::warn!("no device within R_in = {} m; scheduling all devices", self.r_in);
            return (0..distances.len()).collect();
        }
        inner
    }

    pub fn active_set(&self, policy: BbflPolicy, round: u64, distances: &[f64]) -> Vec<usize> {
        match policy {
            BbflPolicy::Interior => self.interior(distances),
            BbflPolicy::Alternative => {
                let mut rng = stream(self.seed, round, 0, Purpose::Schedule);
                if rng.random::<f64>() < self.p_full {
                    (0..distances.len()).collect()
                } else {
                    self.interior(distances)
                }
            }
        }
    }
}

/// Truncated inversion at `γ_{m,max}` over the scheduled devices. The returned
/// design and network cover only `active`.
pub fn bbfl_design(config: &NetworkConfig, active: &[usize]) -> Result<(NetworkConfig, PowerControlDesign)> {
    let sub = config.subset(active)?;
    let gamma: Vec<f64> = (0..sub.n_devices()).map(|m| sub.gamma_max(m)).collect();
    let design = ota::make_design(&gamma, &sub)?;
    Ok((sub, design))
}

/// Noiseless uniform aggregation of the clipped full-batch gradients.
pub fn ideal_fedavg(
    spec: &ObjectiveSpec,
    w: &ModelParams,
    datasets: &[LocalDataset],
    eta: f64,
    g_max: f64,
) -> Result<ModelParams> {
    let g = learner::global_gradient(spec, w, datasets, g_max)?;
    Ok(learner::sgd_step(w, &g, eta))
}
