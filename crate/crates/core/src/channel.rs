//! Large-scale path loss, Rayleigh block fading, receiver noise and the
//! closed-form truncation statistics of truncated channel inversion.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Reference distance of the log-distance path-loss model, in meters.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub positions: Vec<[f64; 2]>,
    pub ps_position: [f64; 2],
    pub r_max: f64,
}

impl Deployment {
    pub fn new(positions: Vec<[f64; 2]>, ps_position: [f64; 2], r_max: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Config("deployment needs at least one device".into()));
        }
        if !(r_max > 0.0) {
            return Err(Error::Config(format!("r_max must be positive, got {r_max}")));
        }
        let dep = Self {
            positions,
            ps_position,
            r_max,
        };
        for (m, dist) in dep.distances().iter().enumerate() {
            if *dist > r_max * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "device {m} at distance {dist} m lies outside r_max = {r_max} m"
                )));
            }
        }
        Ok(dep)
    }

    /// Uniform placement over the disk of radius `r_max` around the origin.
    /// Positions closer than the reference distance are redrawn.
    pub fn sample_uniform(n: usize, r_max: f64, seed: u64) -> Result<Self> {
        if r_max <= REFERENCE_DISTANCE_M {
            return Err(Error::Config(format!(
                "r_max = {r_max} m does not exceed the reference distance"
            )));
        }
        let mut rng = stream(seed, 0, 0, Purpose::Deployment);
        let mut positions = Vec::with_capacity(n);
        while positions.len() < n {
            let r = r_max * rng.random::<f64>().sqrt();
            if r < REFERENCE_DISTANCE_M {
                continue;
            }
            let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            positions.push([r * theta.cos(), r * theta.sin()]);
        }
        Self::new(positions, [0.0, 0.0], r_max)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.positions
            .iter()
            .map(|p| (p[0] - self.ps_position[0]).hypot(p[1] - self.ps_position[1]))
            .collect()
    }
}

/// Average channel gains Λ_m on a linear power scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LargeScaleGains(Vec<f64>);

impl LargeScaleGains {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::Config("gain list is empty".into()));
        }
        if let Some((m, l)) = lambda
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::Domain(format!("gain of device {m} must be positive, got {l}")));
        }
        Ok(Self(lambda))
    }

    pub fn homogeneous(n: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, m: usize) -> f64 {
        self.0[m]
    }
}

impl TryFrom<Vec<f64>> for LargeScaleGains {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LargeScaleGains> for Vec<f64> {
    fn from(g: LargeScaleGains) -> Self {
        g.0
    }
}

/// Log-distance path loss: `Λ = 10^(-(pl0_db + 10·exponent·log10(dist))/10)`.
pub fn pathloss_gain(dist: f64, exponent: f64, pl0_db: f64) -> Result<f64> {
    if !(dist >= REFERENCE_DISTANCE_M) {
        return Err(Error::Config(format!(
            "distance {dist} m is below the reference distance"
        )));
    }
    let loss_db = pl0_db + 10.0 * exponent * dist.log10();
    Ok(10f64.powf(-loss_db / 10.0))
}

pub fn pathloss_gains(deployment: &Deployment, exponent: f64, pl0_db: f64) -> Result<LargeScaleGains> {
    let lambda = deployment
        .distances()
        .into_iter()
        .map(|d| pathloss_gain(d, exponent, pl0_db))
        .collect::<Result<Vec<_>>>()?;
    LargeScaleGains::new(lambda)
}

/// Channel coefficients of all devices in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingDraw {
    pub h: Vec<Complex64>,
    pub round: u64,
}

impl FadingDraw {
    /// Order-sensitive checksum over the exact bit patterns of the draw.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.round.to_le_bytes());
        for h in &self.h {
            hasher.update(h.re.to_bits().to_le_bytes());
            hasher.update(h.im.to_bits().to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

/// One `CN(0, variance)` sample.
pub fn complex_gaussian<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Rayleigh fading `h_m ~ CN(0, Λ_m)`, one independent stream per device and round.
pub fn sample_fading(gains: &LargeScaleGains, seed: u64, round: u64) -> FadingDraw {
    let h = gains
        .as_slice()
        .iter()
        .enumerate()
        .map(|(m, &lambda)| {
            let mut rng = stream(seed, round, m as u64, Purpose::Fading);
            complex_gaussian(lambda, &mut rng)
        })
        .collect();
    FadingDraw { h, round }
}

/// Receiver noise `z ~ CN(0, N0 I)`.
///
/// A d-dimensional real gradient occupies `ceil(d/2)` complex channel uses
/// (consecutive entries paired as real and imaginary parts), so each real
/// entry of the de-embedded noise has variance `N0/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub n0: f64,
    pub d: usize,
}

impl NoiseModel {
    pub fn new(n0: f64, d: usize) -> Result<Self> {
        if !(n0 >= 0.0) || !n0.is_finite() {
            return Err(Error::Domain(format!("noise variance must be >= 0, got {n0}")));
        }
        if d == 0 {
            return Err(Error::Domain("signal dimension must be >= 1".into()));
        }
        Ok(Self { n0, d })
    }

    /// Number of complex channel uses per upload.
    pub fn symbols(&self) -> usize {
        self.d.div_ceil(2)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Complex64> {
        (0..self.symbols()).map(|_| complex_gaussian(self.n0, rng)).collect()
    }

    pub fn sample(&self, seed: u64, round: u64) -> Vec<Complex64> {
        let mut rng = stream(seed, round, 0, Purpose::Noise);
        self.sample_with(&mut rng)
    }

    /// Expected squared norm of the de-embedded real noise vector.
    pub fn real_energy(&self) -> f64 {
        self.d as f64 * self.n0 / 2.0
    }
}

/// Packs a real vector into complex symbols, zero-padding an odd tail.
pub fn pair_real(x: &[f64]) -> Vec<Complex64> {
    x.chunks(2)
        .map(|c| Complex64::new(c[0], c.get(1).copied().unwrap_or(0.0)))
        .collect()
}

/// Inverse of [`pair_real`]; drops the padding entry when `d` is odd.
pub fn unpair_real(symbols: &[Complex64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * symbols.len());
    for s in symbols {
        out.push(s.re);
        out.push(s.im);
    }
    out.truncate(d);
    out
}

fn check_domain(lambda: f64, e_s: f64, d: usize) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    if !(e_s > 0.0) {
        return Err(Error::Domain(format!("E_s must be positive, got {e_s}")));
    }
    if d == 0 {
        return Err(Error::Domain("d must be >= 1".into()));
    }
    Ok(())
}

/// Transmission threshold on |h| for pre-scaler `gamma`.
pub fn truncation_threshold(gamma: f64, g_max: f64, d: usize, e_s: f64) -> f64 {
    g_max * gamma / (d as f64 * e_s).sqrt()
}

/// `E[χ] = P(|h| >= threshold) = exp(-γ² G² / (d Λ E_s))` under Rayleigh fading.
pub fn truncation_probability(gamma: f64, lambda: f64, g_max: f64, d: usize, e_s: f64) -> Result<f64> {
    check_domain(lambda, e_s, d)?;
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok((-gamma * gamma * g_max * g_max / (d as f64 * lambda * e_s)).exp())
}

/// Expected per-device scale `α_m = γ E[χ]`.
pub fn alpha_m(gamma: f64, lambda: f64, g_max: f64, d: usize, e_s: f64) -> Result<f64> {
    Ok(gamma * truncation_probability(gamma, lambda, g_max, d, e_s)?)
}

/// Maximizer of `α_m(γ)`: `sqrt(d Λ E_s / (2 G²))`.
pub fn gamma_max(lambda: f64, g_max: f64, d: usize, e_s: f64) -> f64 {
    (d as f64 * lambda * e_s / (2.0 * g_max * g_max)).sqrt()
}

/// Peak value of `α_m`: `sqrt(d Λ E_s / (2e G²))`.
pub fn alpha_max(lambda: f64, g_max: f64, d: usize, e_s: f64) -> f64 {
    (d as f64 * lambda * e_s / (2.0 * std::f64::consts::E * g_max * g_max)).sqrt()
}
