//! One round of over-the-air gradient upload with truncated channel inversion.
//!
//! Device `m` pre-scales its gradient by `γ_m`, inverts its channel and stays
//! silent whenever `|h_m| < G_max γ_m / sqrt(d E_s)`. The parameter server
//! divides the superposed signal by the post-scaler `α = Σ_m α_m`, which makes
//! the estimate conditionally unbiased for `Σ_m p_m g_m` with `p_m = α_m / α`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, FadingDraw};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

/// Relative slack allowed on the `‖g‖ <= G_max` contract.
const NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerControlDesign {
    pub gamma: Vec<f64>,
    pub alpha_m: Vec<f64>,
    pub alpha: f64,
    pub p: Vec<f64>,
}

impl PowerControlDesign {
    pub fn n_devices(&self) -> usize {
        self.gamma.len()
    }
}

/// Builds the design induced by pre-scalers `gamma`.
pub fn make_design(gamma: &[f64], config: &NetworkConfig) -> Result<PowerControlDesign> {
    if gamma.len() != config.n_devices() {
        return Err(Error::Domain(format!(
            "{} pre-scalers for {} devices",
            gamma.len(),
            config.n_devices()
        )));
    }
    if let Some((m, g)) = gamma.iter().enumerate().find(|(_, g)| !(**g > 0.0 && g.is_finite())) {
        return Err(Error::Domain(format!("pre-scaler of device {m} must be positive, got {g}")));
    }
    let alpha_m = gamma
        .iter()
        .enumerate()
        .map(|(m, &g)| config.alpha_m(m, g))
        .collect::<Result<Vec<_>>>()?;
    let alpha: f64 = alpha_m.iter().sum();
    if !(alpha > 0.0) {
        return Err(Error::Domain("post-scaler underflowed to zero".into()));
    }
    let p = alpha_m.iter().map(|a| a / alpha).collect();
    Ok(PowerControlDesign {
        gamma: gamma.to_vec(),
        alpha_m,
        alpha,
        p,
    })
}

/// `χ = 1` iff `|h| >= G_max γ / sqrt(d E_s)` (inclusive).
pub fn transmit_indicator(h: Complex64, gamma: f64, config: &NetworkConfig) -> bool {
    h.norm() >= config.threshold(gamma)
}

/// Complex baseband signal of one device, `None` when it stays silent.
pub fn transmit_signal(
    grad: &[f64],
    gamma: f64,
    h: Complex64,
    config: &NetworkConfig,
) -> Option<Vec<Complex64>> {
    if !transmit_indicator(h, gamma, config) {
        return None;
    }
    let scale = gamma / h;
    Some(channel::pair_real(grad).into_iter().map(|s| s * scale).collect())
}

/// `‖x‖² / d` for a transmitted signal.
pub fn per_sample_energy(x: &[Complex64], d: usize) -> f64 {
    x.iter().map(|s| s.norm_sqr()).sum::<f64>() / d as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub g_hat: Vec<f64>,
    pub active_mask: Vec<bool>,
    pub signal_part: Vec<f64>,
    pub noise_part: Vec<f64>,
}

impl GradientEstimate {
    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|a| **a).count()
    }
}

pub(crate) fn check_gradients(local_grads: &[Vec<f64>], config: &NetworkConfig) -> Result<()> {
    if local_grads.len() != config.n_devices() {
        return Err(Error::Contract(format!(
            "{} gradients for {} devices",
            local_grads.len(),
            config.n_devices()
        )));
    }
    for (m, g) in local_grads.iter().enumerate() {
        if g.len() != config.d {
            return Err(Error::Contract(format!(
                "gradient of device {m} has dimension {} instead of {}",
                g.len(),
                config.d
            )));
        }
        let norm = crate::linalg::norm(g);
        if norm > config.g_max * (1.0 + NORM_SLACK) {
            return Err(Error::Contract(format!(
                "gradient of device {m} has norm {norm} above G_max = {}",
                config.g_max
            )));
        }
    }
    Ok(())
}

/// Aggregates one round: `ĝ = (Σ_m χ_m γ_m g_m + z) / α`.
pub fn ota_round(
    local_grads: &[Vec<f64>],
    design: &PowerControlDesign,
    config: &NetworkConfig,
    fading: &FadingDraw,
    noise: &[Complex64],
) -> Result<GradientEstimate> {
    check_gradients(local_grads, config)?;
    if design.n_devices() != config.n_devices() || fading.h.len() != config.n_devices() {
        return Err(Error::Contract("design, fading and network disagree on N".into()));
    }
    let d = config.d;
    let mut signal_part = vec![0.0; d];
    let active_mask: Vec<bool> = design
        .gamma
        .iter()
        .zip(&fading.h)
        .map(|(&g, &h)| transmit_indicator(h, g, config))
        .collect();
    for ((grad, &gamma), &active) in local_grads.iter().zip(&design.gamma).zip(&active_mask) {
        if active {
            let c = gamma / design.alpha;
            for (s, g) in signal_part.iter_mut().zip(grad) {
                *s += c * g;
            }
        }
    }
    let noise_part = noise_vector(noise, d, design.alpha)?;
    let g_hat = signal_part.iter().zip(&noise_part).map(|(s, z)| s + z).collect();
    Ok(GradientEstimate {
        g_hat,
        active_mask,
        signal_part,
        noise_part,
    })
}

pub(crate) fn noise_vector(noise: &[Complex64], d: usize, post_scaler: f64) -> Result<Vec<f64>> {
    if noise.len() != d.div_ceil(2) {
        return Err(Error::Contract(format!(
            "noise draw has {} symbols, expected {}",
            noise.len(),
            d.div_ceil(2)
        )));
    }
    Ok(channel::unpair_real(noise, d)
        .into_iter()
        .map(|z| z / post_scaler)
        .collect())
}

/// Monte-Carlo mean and variance `E‖ĝ - Eĝ‖²` over fading and noise at fixed
/// gradients. Trial `i` uses the streams of round `i` under `seed`. The
/// variance of a single trial is reported as 0.
pub fn empirical_moments(
    design: &PowerControlDesign,
    config: &NetworkConfig,
    local_grads: &[Vec<f64>],
    n_trials: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if n_trials == 0 {
        return Err(Error::Domain("n_trials must be >= 1".into()));
    }
    check_gradients(local_grads, config)?;
    let d = config.d;
    let noise_model = config.noise();
    const CHUNKS: usize = 64;
    let chunk = n_trials.div_ceil(CHUNKS);
    // per-chunk Welford accumulators, merged in chunk order
    let partials: Vec<Result<(usize, Vec<f64>, f64)>> = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut count = 0usize;
            let mut mean = vec![0.0; d];
            let mut m2 = 0.0;
            for t in (c * chunk)..((c + 1) * chunk).min(n_trials) {
                let fading = channel::sample_fading(&config.gains, seed, t as u64);
                let noise = noise_model.sample(seed, t as u64);
                let est = ota_round(local_grads, design, config, &fading, &noise)?;
                count += 1;
                let k = count as f64;
                for (m, g) in mean.iter_mut().zip(&est.g_hat) {
                    let delta = g - *m;
                    *m += delta / k;
                    m2 += delta * (g - *m);
                }
            }
            Ok((count, mean, m2))
        })
        .collect();
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    let mut m2 = 0.0;
    for part in partials {
        let (nb, mb, m2b) = part?;
        if nb == 0 {
            continue;
        }
        let (na, nbf) = (count as f64, nb as f64);
        let total = na + nbf;
        let mut shift = 0.0;
        for (ma, mbv) in mean.iter_mut().zip(&mb) {
            let delta = mbv - *ma;
            shift += delta * delta;
            *ma += delta * nbf / total;
        }
        m2 += m2b + shift * na * nbf / total;
        count += nb;
    }
    let var = if n_trials == 1 { 0.0 } else { m2 / (n_trials as f64 - 1.0) };
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LargeScaleGains;
    use approx::assert_relative_eq;

    fn net(lambda: Vec<f64>, d: usize) -> NetworkConfig {
        NetworkConfig::new(LargeScaleGains::new(lambda).unwrap(), 1.0, 0.0, d, 10.0).unwrap()
    }

    #[test]
    fn symmetric_design_is_uniform() {
        let cfg = net(vec![2.0, 2.0], 100);
        let dsg = make_design(&[0.3, 0.3], &cfg).unwrap();
        assert_eq!(dsg.p, vec![0.5, 0.5]);
        let one = make_design(&[0.4], &net(vec![1.0], 100)).unwrap();
        assert_eq!(one.p, vec![1.0]);
        assert_eq!(one.alpha, one.alpha_m[0]);
    }

    #[test]
    fn two_device_weights_match_scalar_closed_form() {
        let cfg = net(vec![1.0, 1.0], 100);
        let gm = cfg.gamma_max(0);
        let dsg = make_design(&[gm, 0.1 * gm], &cfg).unwrap();
        // independent evaluation: a1 = gm e^{-1/2}, a2 = 0.1 gm e^{-0.01/2}
        let a1 = gm * (-0.5f64).exp();
        let a2 = 0.1 * gm * (-0.005f64).exp();
        assert_relative_eq!(dsg.p[0], a1 / (a1 + a2), max_relative = 1e-12);
        assert_relative_eq!(dsg.p[1], a2 / (a1 + a2), max_relative = 1e-12);
        assert_relative_eq!(dsg.p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn design_rejects_nonpositive_gamma() {
        let cfg = net(vec![1.0, 1.0], 10);
        assert!(make_design(&[0.0, 1.0], &cfg).is_err());
        assert!(make_design(&[-1.0, 1.0], &cfg).is_err());
    }

    #[test]
    fn indicator_boundary_is_inclusive() {
        let cfg = net(vec![1.0], 100);
        let gamma = 0.5;
        let thr = cfg.threshold(gamma);
        assert!(transmit_indicator(Complex64::new(thr, 0.0), gamma, &cfg));
        assert!(!transmit_indicator(Complex64::new(thr * (1.0 - 1e-12), 0.0), gamma, &cfg));
        assert!(transmit_indicator(Complex64::new(0.0, 0.0), 0.0, &cfg));
        assert!(!transmit_indicator(Complex64::new(0.0, 0.0), 0.1, &cfg));
    }

    #[test]
    fn boundary_transmission_meets_energy_budget() {
        let d = 101;
        let cfg = net(vec![1.0], d);
        let gamma = 0.37;
        let mut g = vec![0.0; d];
        g[0] = cfg.g_max;
        let thr = cfg.threshold(gamma);
        let h = Complex64::from_polar(thr, 0.7);
        let x = transmit_signal(&g, gamma, h, &cfg).unwrap();
        assert!(per_sample_energy(&x, d) <= cfg.e_s * (1.0 + 1e-12));
    }

    #[test]
    fn noiseless_round_substitution() {
        let cfg = net(vec![1.0, 4.0], 4);
        let dsg = make_design(&[0.1, 0.2], &cfg).unwrap();
        let grads = vec![vec![1.0, 0.0, -1.0, 2.0], vec![0.5, 0.5, 0.5, 0.5]];
        let strong = FadingDraw {
            h: vec![Complex64::new(5.0, 0.0), Complex64::new(0.0, -5.0)],
            round: 0,
        };
        let zero = vec![Complex64::new(0.0, 0.0); 2];
        let est = ota_round(&grads, &dsg, &cfg, &strong, &zero).unwrap();
        for k in 0..4 {
            let want = (0.1 * grads[0][k] + 0.2 * grads[1][k]) / dsg.alpha;
            assert_relative_eq!(est.g_hat[k], want, max_relative = 1e-14);
        }
        let weak = FadingDraw {
            h: vec![Complex64::new(0.0, 0.0); 2],
            round: 0,
        };
        let est = ota_round(&grads, &dsg, &cfg, &weak, &zero).unwrap();
        assert!(est.g_hat.iter().all(|&v| v == 0.0));
        assert_eq!(est.active_count(), 0);
    }

    #[test]
    fn round_rejects_oversized_gradient() {
        let cfg = net(vec![1.0], 2);
        let dsg = make_design(&[0.1], &cfg).unwrap();
        let f = FadingDraw {
            h: vec![Complex64::new(1.0, 0.0)],
            round: 0,
        };
        let z = vec![Complex64::new(0.0, 0.0)];
        let err = ota_round(&[vec![10.0, 1.0]], &dsg, &cfg, &f, &z).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn single_trial_variance_is_zero() {
        let cfg = net(vec![1.0, 1.0], 3);
        let dsg = make_design(&[0.1, 0.1], &cfg).unwrap();
        let grads = vec![vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]];
        let (_, var) = empirical_moments(&dsg, &cfg, &grads, 1, 0).unwrap();
        assert_eq!(var, 0.0);
    }

    #[test]
    fn deterministic_channel_limit_has_zero_variance() {
        // Huge gains: every device always clears the threshold; no noise.
        let cfg = net(vec![1e12, 1e12], 3);
        let dsg = make_design(&[0.1, 0.2], &cfg).unwrap();
        let grads = vec![vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]];
        let (mean, var) = empirical_moments(&dsg, &cfg, &grads, 200, 4).unwrap();
        assert!(var < 1e-20);
        for k in 0..3 {
            let want = dsg.p[0] * grads[0][k] + dsg.p[1] * grads[1][k];
            assert_relative_eq!(mean[k], want, max_relative = 1e-9);
        }
    }
}
