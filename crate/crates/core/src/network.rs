use serde::{Deserialize, Serialize};

use crate::channel::{self, LargeScaleGains, NoiseModel};
use crate::error::{Error, Result};

/// Static wireless and system parameters shared by every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub gains: LargeScaleGains,
    /// Per-sample energy budget in joules.
    pub e_s: f64,
    /// Noise variance per complex channel use (`z ~ CN(0, N0)`).
    pub n0: f64,
    /// Gradient dimension.
    pub d: usize,
    pub g_max: f64,
}

impl NetworkConfig {
    pub fn new(gains: LargeScaleGains, e_s: f64, n0: f64, d: usize, g_max: f64) -> Result<Self> {
        if !(e_s > 0.0 && e_s.is_finite()) {
            return Err(Error::Config(format!("E_s must be positive, got {e_s}")));
        }
        if !(n0 >= 0.0 && n0.is_finite()) {
            return Err(Error::Config(format!("N0 must be >= 0, got {n0}")));
        }
        if d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if !(g_max > 0.0 && g_max.is_finite()) {
            return Err(Error::Config(format!("G_max must be positive, got {g_max}")));
        }
        Ok(Self {
            gains,
            e_s,
            n0,
            d,
            g_max,
        })
    }

    pub fn n_devices(&self) -> usize {
        self.gains.len()
    }

    pub fn lambda(&self, m: usize) -> f64 {
        self.gains.get(m)
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            n0: self.n0,
            d: self.d,
        }
    }

    pub fn threshold(&self, gamma: f64) -> f64 {
        channel::truncation_threshold(gamma, self.g_max, self.d, self.e_s)
    }

    pub fn alpha_m(&self, m: usize, gamma: f64) -> Result<f64> {
        channel::alpha_m(gamma, self.lambda(m), self.g_max, self.d, self.e_s)
    }

    pub fn truncation_probability(&self, m: usize, gamma: f64) -> Result<f64> {
        channel::truncation_probability(gamma, self.lambda(m), self.g_max, self.d, self.e_s)
    }

    pub fn gamma_max(&self, m: usize) -> f64 {
        channel::gamma_max(self.lambda(m), self.g_max, self.d, self.e_s)
    }

    pub fn alpha_max(&self, m: usize) -> f64 {
        channel::alpha_max(self.lambda(m), self.g_max, self.d, self.e_s)
    }

    /// The same network restricted to the devices in `subset`, in that order.
    pub fn subset(&self, subset: &[usize]) -> Result<Self> {
        let lambda = subset.iter().map(|&m| self.lambda(m)).collect();
        Self::new(LargeScaleGains::new(lambda)?, self.e_s, self.n0, self.d, self.g_max)
    }

    /// Largest real amplitude device `m` can apply after inverting `h`
    /// while a norm-`G_max` gradient stays within the energy budget.
    pub fn max_amplitude(&self, h_abs: f64) -> f64 {
        h_abs * (self.d as f64 * self.e_s).sqrt() / self.g_max
    }
}

/// Converts a dBm-scale power to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Per-sample energy `E_s = P_tx / B`.
pub fn energy_per_sample(ptx_dbm: f64, bandwidth_hz: f64) -> f64 {
    dbm_to_watts(ptx_dbm) / bandwidth_hz
}

/// Per-sample noise energy from a PSD in dBm/Hz (watts per hertz = joules).
pub fn noise_energy(noise_psd_dbm_hz: f64) -> f64 {
    dbm_to_watts(noise_psd_dbm_hz)
}
