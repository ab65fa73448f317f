//! Experiment configuration (TOML). Every field has a default, so an empty
//! file describes the reference desk-scale experiment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Sca,
    Lcpc,
    Opc,
    Vanilla,
    BbflInterior,
    BbflAlternative,
    IdealFedavg,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::IdealFedavg,
        Scheme::Sca,
        Scheme::Opc,
        Scheme::Lcpc,
        Scheme::Vanilla,
        Scheme::BbflAlternative,
        Scheme::BbflInterior,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Sca => "sca",
            Scheme::Lcpc => "lcpc",
            Scheme::Opc => "opc",
            Scheme::Vanilla => "vanilla",
            Scheme::BbflInterior => "bbfl_interior",
            Scheme::BbflAlternative => "bbfl_alternative",
            Scheme::IdealFedavg => "ideal_fedavg",
        }
    }

    /// Reconstructed from a behavioral description rather than a full algorithm.
    pub fn is_surrogate(&self) -> bool {
        matches!(self, Scheme::Opc | Scheme::Lcpc)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                let known: Vec<_> = Scheme::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown scheme '{s}' (known: {})", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathlossConfig {
    pub exponent: f64,
    pub pl0_db: f64,
}

impl Default for PathlossConfig {
    fn default() -> Self {
        Self {
            exponent: 2.2,
            pl0_db: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default = "defaults::noise_std")]
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub n_classes: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub labels_per_device: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                dim: defaults::dim(),
                per_class: defaults::per_class(),
                separation: defaults::separation(),
                noise_std: defaults::noise_std(),
            },
            n_classes: 10,
            seed: 0,
            holdout_fraction: 0.2,
            labels_per_device: 2,
        }
    }
}

mod defaults {
    pub fn dim() -> usize {
        20
    }
    pub fn per_class() -> usize {
        250
    }
    pub fn separation() -> f64 {
        1.0
    }
    pub fn noise_std() -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub l2: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            l2: 1e-4,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub p_floor: f64,
    pub init_scale: f64,
    pub stationarity_dirs: usize,
}

impl Default for ScaConfig {
    fn default() -> Self {
        let d = crate::sca::ScaOptions::default();
        Self {
            max_iters: d.max_iters,
            rel_tol: d.rel_tol,
            p_floor: d.p_floor,
            init_scale: d.init_scale,
            stationarity_dirs: d.stationarity_dirs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BbflConfig {
    /// Interior radius as a fraction of `r_max_m`.
    pub r_in_fraction: f64,
    /// Probability that the alternating policy schedules every device.
    pub p_full: f64,
}

impl Default for BbflConfig {
    fn default() -> Self {
        Self {
            r_in_fraction: 0.6,
            p_full: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaMode {
    Estimate,
}

/// `kappa = "estimate"` measures gradient dissimilarity at `w_0`; a number overrides it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaSetting {
    Value(f64),
    Mode(KappaMode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_devices: usize,
    pub r_max_m: f64,
    pub deployment_seed: u64,
    pub pathloss: PathlossConfig,
    /// Replaces the path-loss gains when set (one entry per device).
    pub lambda_override: Option<Vec<f64>>,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub ptx_dbm: f64,
    pub g_max: f64,
    pub eta: f64,
    /// Smoothness constant `L`; defaults to `1/eta`.
    pub smoothness: Option<f64>,
    pub t_rounds: usize,
    /// Mini-batch size; defaults to the full local dataset.
    pub batch_size: Option<usize>,
    /// Mini-batches drawn per device when estimating `σ_m`.
    pub sigma_samples: usize,
    pub seeds: Vec<u64>,
    pub schemes: Vec<Scheme>,
    pub kappa: KappaSetting,
    pub sca: ScaConfig,
    pub bbfl: BbflConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Accuracy level for the rounds-to-target table.
    pub target_accuracy: f64,
    pub eta_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_devices: 10,
            r_max_m: 1750.0,
            deployment_seed: 7,
            pathloss: PathlossConfig::default(),
            lambda_override: None,
            bandwidth_hz: 1e6,
            noise_psd_dbm_hz: -173.0,
            ptx_dbm: 0.0,
            g_max: 10.0,
            eta: 0.1,
            smoothness: None,
            t_rounds: 200,
            batch_size: None,
            sigma_samples: 64,
            seeds: (0..20).collect(),
            schemes: Scheme::ALL.to_vec(),
            kappa: KappaSetting::Mode(KappaMode::Estimate),
            sca: ScaConfig::default(),
            bbfl: BbflConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            target_accuracy: 0.6,
            eta_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness.unwrap_or(1.0 / self.eta)
    }

    /// Short hash identifying every field of the configuration.
    pub fn config_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_max_m", self.r_max_m),
            ("pathloss.exponent", self.pathloss.exponent),
            ("bandwidth_hz", self.bandwidth_hz),
            ("g_max", self.g_max),
            ("eta", self.eta),
            ("target_accuracy", self.target_accuracy),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("pathloss.pl0_db", self.pathloss.pl0_db),
            ("noise_psd_dbm_hz", self.noise_psd_dbm_hz),
            ("ptx_dbm", self.ptx_dbm),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.n_devices == 0 {
            return Err(Error::Config("n_devices must be >= 1".into()));
        }
        if self.t_rounds == 0 {
            return Err(Error::Config("t_rounds must be >= 1".into()));
        }
        if let Some(l) = self.smoothness {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("smoothness must be positive, got {l}")));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("at least one scheme is required".into()));
        }
        if let Some(l) = &self.lambda_override {
            if l.len() != self.n_devices {
                return Err(Error::Config(format!(
                    "lambda_override has {} entries for {} devices",
                    l.len(),
                    self.n_devices
                )));
            }
            if l.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("lambda_override entries must be positive".into()));
            }
        }
        if let KappaSetting::Value(k) = self.kappa {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::Config(format!("kappa must be >= 0, got {k}")));
            }
        }
        if !(self.bbfl.r_in_fraction > 0.0) || !(0.0..=1.0).contains(&self.bbfl.p_full) {
            return Err(Error::Config("bbfl.r_in_fraction must be > 0 and bbfl.p_full in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dataset.holdout_fraction) {
            return Err(Error::Config("dataset.holdout_fraction must be in [0, 1)".into()));
        }
        if self.sca.max_iters == 0 || !(self.sca.init_scale > 0.0 && self.sca.init_scale < 1.0) {
            return Err(Error::Config("sca.max_iters must be >= 1 and sca.init_scale in (0, 1)".into()));
        }
        if self.eta_grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config("eta_grid entries must be positive".into()));
        }
        if let DataSource::Synthetic { dim, per_class, separation, noise_std } = &self.dataset.source {
            if *dim == 0 || *per_class == 0 || !(*separation > 0.0) || !(*noise_std >= 0.0) {
                return Err(Error::Config("synthetic dataset parameters must be positive".into()));
            }
        }
        Ok(())
    }
}
