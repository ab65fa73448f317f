//! Multi-seed training runs over shared channel randomness.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig, KappaSetting, Scheme};
use crate::baselines::{self, BbflPolicy, BbflScheduler};
use crate::bound::{self, ZetaComponents};
use crate::channel::{self, Deployment, FadingDraw, LargeScaleGains};
use crate::error::{Error, Result};
use crate::learner::{self, data, Dataset, GaussianMixture, LocalDataset, ModelParams, ObjectiveSpec, PartitionManifest, Sample};
use crate::linalg;
use crate::network::{self, NetworkConfig};
use crate::ota::{self, GradientEstimate, PowerControlDesign};
use crate::rng::{stream, Purpose};
use crate::sca::{self, DesignProblem, ScaOptions, ScaOutcome};

/// Metrics of one `(scheme, seed, round)`. Round `t` describes `w_t`; the
/// channel fields describe the aggregation that produced `w_{t+1}` and are
/// absent on the final round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_id: String,
    pub scheme: Scheme,
    pub seed: u64,
    pub round: usize,
    pub test_accuracy: f64,
    pub global_loss: f64,
    pub grad_norm_sq: f64,
    pub zeta_components: Option<ZetaComponents>,
    pub bias_term: Option<f64>,
    pub active_count: Option<usize>,
    pub channel_checksum: Option<String>,
}

/// Everything shared by the cells of one experiment.
pub struct Setup {
    pub config: ExperimentConfig,
    pub config_id: String,
    pub spec: ObjectiveSpec,
    pub w0: ModelParams,
    pub train: Vec<LocalDataset>,
    pub test: Vec<Sample>,
    pub deployment: Deployment,
    pub network: NetworkConfig,
    pub kappa: f64,
    pub sigma: Vec<f64>,
    pub sca: Option<ScaOutcome>,
    pub lcpc: Option<PowerControlDesign>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = &cfg.dataset;
    match &ds.source {
        DataSource::Synthetic {
            dim,
            per_class,
            separation,
            noise_std,
        } => GaussianMixture {
            n_classes: ds.n_classes,
            dim: *dim,
            per_class: *per_class,
            separation: *separation,
            noise_std: *noise_std,
        }
        .generate(ds.seed),
        DataSource::Csv { path } => data::load_csv(path, ds.n_classes),
        DataSource::Idx { images, labels } => data::load_idx(images, labels, ds.n_classes),
    }
}

/// `σ_m² = E‖g_batch - g_full‖²` at `w`, estimated from clipped mini-batches.
pub fn estimate_sigma(
    spec: &ObjectiveSpec,
    w: &ModelParams,
    datasets: &[LocalDataset],
    batch_size: usize,
    g_max: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    datasets
        .iter()
        .map(|ds| {
            if batch_size >= ds.len() || samples == 0 {
                return Ok(0.0);
            }
            let (_, full) = learner::full_loss_and_grad(spec, w, ds)?;
            let full = learner::clip(full, g_max);
            let mut rng = stream(seed, 0, ds.owner as u64, Purpose::Minibatch);
            let mut acc = 0.0;
            for _ in 0..samples {
                let g = learner::local_gradient(spec, w, ds, batch_size, g_max, &mut rng)?;
                acc += linalg::norm_sq(&linalg::sub(&g, &full));
            }
            Ok((acc / samples as f64).sqrt())
        })
        .collect()
}

impl Setup {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let full = load_dataset(&cfg)?;
        let (train_pool, test) = full.split_holdout(cfg.dataset.holdout_fraction, cfg.dataset.seed)?;
        let train = data::partition_noniid(&train_pool, cfg.n_devices, cfg.dataset.labels_per_device, cfg.dataset.seed)?;
        let spec = ObjectiveSpec::new(full.feature_dim(), cfg.model.hidden.clone(), full.n_classes, cfg.model.l2)?;
        let w0 = spec.init(cfg.model.init_seed);
        let deployment = Deployment::sample_uniform(cfg.n_devices, cfg.r_max_m, cfg.deployment_seed)?;
        let gains = match &cfg.lambda_override {
            Some(l) => LargeScaleGains::new(l.clone())?,
            None => channel::pathloss_gains(&deployment, cfg.pathloss.exponent, cfg.pathloss.pl0_db)?,
        };
        let network = NetworkConfig::new(
            gains,
            network::energy_per_sample(cfg.ptx_dbm, cfg.bandwidth_hz),
            network::noise_energy(cfg.noise_psd_dbm_hz),
            spec.dim(),
            cfg.g_max,
        )?;
        let kappa = match cfg.kappa {
            KappaSetting::Value(k) => k,
            KappaSetting::Mode(_) => learner::estimate_kappa(&spec, &w0, &train, cfg.g_max)?,
        };
        let min_local = train.iter().map(|d| d.len()).min().unwrap_or(0);
        let batch = cfg.batch_size.unwrap_or(min_local);
        if let Some(ds) = train.iter().find(|d| batch > d.len()) {
            return Err(Error::Config(format!(
                "batch size {batch} exceeds the {} samples of device {}",
                ds.len(),
                ds.owner
            )));
        }
        let sigma = match cfg.batch_size {
            None => vec![0.0; cfg.n_devices],
            Some(b) => estimate_sigma(&spec, &w0, &train, b, cfg.g_max, cfg.sigma_samples, cfg.dataset.seed)?,
        };
        let mut setup = Self {
            config_id: cfg.config_id(),
            spec,
            w0,
            train,
            test: test.samples,
            deployment,
            network,
            kappa,
            sigma,
            sca: None,
            lcpc: None,
            config: cfg,
        };
        if setup.config.schemes.contains(&Scheme::Sca) {
            setup.sca = Some(setup.design()?);
        }
        if setup.config.schemes.contains(&Scheme::Lcpc) {
            setup.lcpc = Some(baselines::lcpc(&setup.network, &setup.sigma)?);
        }
        Ok(setup)
    }

    pub fn design_problem(&self) -> Result<DesignProblem> {
        DesignProblem::from_network(
            &self.network,
            self.config.eta,
            self.config.smoothness(),
            self.kappa,
            self.sigma.clone(),
        )
    }

    pub fn sca_options(&self) -> ScaOptions {
        let s = &self.config.sca;
        ScaOptions {
            max_iters: s.max_iters,
            rel_tol: s.rel_tol,
            p_floor: s.p_floor,
            init_scale: s.init_scale,
            stationarity_dirs: s.stationarity_dirs,
            seed: self.config.deployment_seed,
            ..ScaOptions::default()
        }
    }

    pub fn design(&self) -> Result<ScaOutcome> {
        sca::sca_loop(&self.design_problem()?, None, &self.sca_options())
    }

    pub fn batch_size(&self) -> usize {
        self.config
            .batch_size
            .unwrap_or_else(|| self.train.iter().map(|d| d.len()).min().unwrap_or(1))
    }

    pub fn partition_manifest(&self) -> PartitionManifest {
        PartitionManifest::from_partition(&self.train, self.config.dataset.labels_per_device)
    }

    fn scheduler(&self, seed: u64) -> BbflScheduler {
        BbflScheduler {
            r_in: self.config.bbfl.r_in_fraction * self.config.r_max_m,
            p_full: self.config.bbfl.p_full,
            seed,
        }
    }
}

fn pad_weights(n: usize, active: &[usize], p: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; n];
    for (&m, &v) in active.iter().zip(p) {
        full[m] = v;
    }
    full
}

/// One aggregation step of `scheme`: `(estimate, ζ components, bias term)`.
fn aggregate(
    setup: &Setup,
    scheme: Scheme,
    seed: u64,
    round: u64,
    grads: &[Vec<f64>],
    fading: &FadingDraw,
    noise: &[num_complex::Complex64],
    bbfl_cache: &mut BTreeMap<Vec<usize>, (NetworkConfig, PowerControlDesign)>,
) -> Result<(GradientEstimate, Option<ZetaComponents>, Option<f64>)> {
    let net = &setup.network;
    let n = net.n_devices();
    match scheme {
        Scheme::Sca | Scheme::Lcpc => {
            let design = match scheme {
                Scheme::Sca => &setup.sca.as_ref().expect("sca design built").design,
                _ => setup.lcpc.as_ref().expect("lcpc design built"),
            };
            let est = ota::ota_round(grads, design, net, fading, noise)?;
            let z = bound::zeta(design, &setup.sigma, net)?;
            Ok((est, Some(z), Some(bound::bias_term(&design.p, setup.kappa))))
        }
        Scheme::Vanilla | Scheme::Opc => {
            let decision = match scheme {
                Scheme::Vanilla => baselines::vanilla_ota(&fading.h, net),
                _ => baselines::opc_ota(&fading.h, net),
            };
            let est = baselines::apply_decision(grads, &decision, net, noise)?;
            let bias = (scheme == Scheme::Vanilla).then_some(0.0);
            Ok((est, None, bias))
        }
        Scheme::BbflInterior | Scheme::BbflAlternative => {
            let policy = if scheme == Scheme::BbflInterior {
                BbflPolicy::Interior
            } else {
                BbflPolicy::Alternative
            };
            let active = setup
                .scheduler(seed)
                .active_set(policy, round, &setup.deployment.distances());
            if !bbfl_cache.contains_key(&active) {
                bbfl_cache.insert(active.clone(), baselines::bbfl_design(net, &active)?);
            }
            let (sub, design) = &bbfl_cache[&active];
            let sub_grads: Vec<Vec<f64>> = active.iter().map(|&m| grads[m].clone()).collect();
            let sub_fading = FadingDraw {
                h: active.iter().map(|&m| fading.h[m]).collect(),
                round: fading.round,
            };
            let sub_est = ota::ota_round(&sub_grads, design, sub, &sub_fading, noise)?;
            let mut mask = vec![false; n];
            for (&m, &a) in active.iter().zip(&sub_est.active_mask) {
                mask[m] = a;
            }
            let sigma: Vec<f64> = active.iter().map(|&m| setup.sigma[m]).collect();
            let z = bound::zeta(design, &sigma, sub)?;
            let bias = bound::bias_term(&pad_weights(n, &active, &design.p), setup.kappa);
            Ok((
                GradientEstimate {
                    active_mask: mask,
                    ..sub_est
                },
                Some(z),
                Some(bias),
            ))
        }
        Scheme::IdealFedavg => {
            let g = linalg::mean_of(grads);
            let d = g.len();
            Ok((
                GradientEstimate {
                    signal_part: g.clone(),
                    g_hat: g,
                    active_mask: vec![true; n],
                    noise_part: vec![0.0; d],
                },
                None,
                Some(0.0),
            ))
        }
    }
}

/// Full-batch local losses and unclipped gradients at `w`.
fn local_state(setup: &Setup, w: &ModelParams) -> Result<Vec<(f64, Vec<f64>)>> {
    setup
        .train
        .iter()
        .map(|ds| learner::full_loss_and_grad(&setup.spec, w, ds))
        .collect()
}

/// Trains one `(scheme, seed)` cell for `t_rounds` rounds.
pub fn run_cell(setup: &Setup, scheme: Scheme, seed: u64) -> Result<Vec<MetricsRecord>> {
    let cfg = &setup.config;
    let n = setup.network.n_devices();
    let batch = setup.batch_size();
    let noise_model = setup.network.noise();
    let mut w = setup.w0.clone();
    let mut records = Vec::with_capacity(cfg.t_rounds + 1);
    let mut cache = BTreeMap::new();
    for t in 0..=cfg.t_rounds {
        let state = local_state(setup, &w)?;
        let global_loss = state.iter().map(|(f, _)| f).sum::<f64>() / n as f64;
        let full_grads: Vec<Vec<f64>> = state.into_iter().map(|(_, g)| g).collect();
        let grad_norm_sq = linalg::norm_sq(&linalg::mean_of(&full_grads));
        let mut record = MetricsRecord {
            config_id: setup.config_id.clone(),
            scheme,
            seed,
            round: t,
            test_accuracy: learner::accuracy(&setup.spec, &w, &setup.test),
            global_loss,
            grad_norm_sq,
            zeta_components: None,
            bias_term: None,
            active_count: None,
            channel_checksum: None,
        };
        if t == cfg.t_rounds {
            records.push(record);
            break;
        }
        let round = t as u64;
        let grads = full_grads
            .into_iter()
            .zip(&setup.train)
            .map(|(g, ds)| {
                if batch >= ds.len() {
                    Ok(learner::clip(g, cfg.g_max))
                } else {
                    let mut rng = stream(seed, round, ds.owner as u64, Purpose::Minibatch);
                    learner::local_gradient(&setup.spec, &w, ds, batch, cfg.g_max, &mut rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let fading = channel::sample_fading(&setup.network.gains, seed, round);
        let noise = noise_model.sample(seed, round);
        let (est, zeta, bias) = aggregate(setup, scheme, seed, round, &grads, &fading, &noise, &mut cache)?;
        record.zeta_components = zeta;
        record.bias_term = bias;
        record.active_count = Some(est.active_count());
        record.channel_checksum = Some(fading.checksum());
        records.push(record);
        w = learner::sgd_step(&w, &est.g_hat, cfg.eta);
    }
    Ok(records)
}

/// Runs every `(scheme, seed)` cell in parallel; results keep config order.
pub fn run_cells(setup: &Setup) -> Vec<(Scheme, u64, Result<Vec<MetricsRecord>>)> {
    let cells: Vec<(Scheme, u64)> = setup
        .config
        .schemes
        .iter()
        .flat_map(|&s| setup.config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    cells
        .into_par_iter()
        .map(|(s, seed)| (s, seed, run_cell(setup, s, seed)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_id: String,
    pub metrics_path: PathBuf,
    pub failed_cells: Vec<String>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config_id: &'a str,
    config: &'a ExperimentConfig,
    d: usize,
    lambda: &'a [f64],
    distances: Vec<f64>,
    kappa: f64,
    sigma: &'a [f64],
    sca_design: Option<&'a PowerControlDesign>,
    lcpc_design: Option<&'a PowerControlDesign>,
    surrogate_schemes: Vec<&'static str>,
    partition: PartitionManifest,
}

fn create_new(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(BufWriter::new(f))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create_new(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs all cells, writing `records/{scheme}_seed{seed}.jsonl` per cell, the
/// merged `metrics.jsonl`, summaries and a manifest. Existing files are never
/// overwritten. A failing cell is reported without aborting the others.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let setup = Setup::build(config)?;
    let records_dir = out_dir.join("records");
    fs::create_dir_all(&records_dir)?;
    let manifest = RunManifest {
        config_id: &setup.config_id,
        config: &setup.config,
        d: setup.network.d,
        lambda: setup.network.gains.as_slice(),
        distances: setup.deployment.distances(),
        kappa: setup.kappa,
        sigma: &setup.sigma,
        sca_design: setup.sca.as_ref().map(|o| &o.design),
        lcpc_design: setup.lcpc.as_ref(),
        surrogate_schemes: setup.config.schemes.iter().filter(|s| s.is_surrogate()).map(|s| s.name()).collect(),
        partition: setup.partition_manifest(),
    };
    let mut mw = create_new(&out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut mw, &manifest)?;
    mw.write_all(b"\n")?;
    mw.flush()?;

    let results = run_cells(&setup);
    let mut failed = Vec::new();
    let mut cell_paths = Vec::new();
    for (scheme, seed, res) in results {
        match res {
            Ok(records) => {
                let path = records_dir.join(format!("{scheme}_seed{seed}.jsonl"));
                write_jsonl(&path, &records)?;
                cell_paths.push(path);
            }
            Err(e) => {
                log::error!("cell {scheme}/seed {seed} failed: {e}");
                failed.push(format!("{scheme}/seed{seed}: {e}"));
            }
        }
    }
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut merged = create_new(&metrics_path)?;
    for p in &cell_paths {
        let mut r = BufReader::new(File::open(p)?);
        std::io::copy(&mut r, &mut merged)?;
    }
    merged.flush()?;
    drop(merged);
    super::report::write_report(&[metrics_path.clone()], config.target_accuracy, &out_dir.join("summary"))?;
    if !failed.is_empty() {
        return Err(Error::Solver(format!("{} cell(s) failed: {}", failed.len(), failed.join("; "))));
    }
    Ok(RunSummary {
        config_id: setup.config_id,
        metrics_path,
        failed_cells: failed,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let r = BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Output of the `design` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignFile {
    pub problem: DesignProblem,
    pub design: PowerControlDesign,
    pub certificate: sca::FeasibilityCertificate,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl DesignFile {
    pub fn from_outcome(problem: DesignProblem, o: ScaOutcome) -> Self {
        Self {
            problem,
            design: o.design,
            certificate: o.certificate,
            objective_trace: o.state.objective_trace,
            iterations: o.state.iteration,
            converged: o.state.converged,
        }
    }
}

/// Designs pre-scalers for a stand-alone problem or the configured deployment.
pub fn design_prescalers(config: &ExperimentConfig, problem: Option<DesignProblem>) -> Result<DesignFile> {
    let (problem, opts) = match problem {
        Some(p) => {
            p.validate()?;
            let opts = ScaOptions {
                max_iters: config.sca.max_iters,
                rel_tol: config.sca.rel_tol,
                p_floor: config.sca.p_floor,
                init_scale: config.sca.init_scale,
                stationarity_dirs: config.sca.stationarity_dirs,
                seed: config.deployment_seed,
                ..ScaOptions::default()
            };
            (p, opts)
        }
        None => {
            let mut cfg = config.clone();
            cfg.schemes = vec![Scheme::IdealFedavg];
            let setup = Setup::build(&cfg)?;
            (setup.design_problem()?, setup.sca_options())
        }
    };
    let outcome = sca::sca_loop(&problem, None, &opts)?;
    Ok(DesignFile::from_outcome(problem, outcome))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaScore {
    pub eta: f64,
    /// Mean final test accuracy over schemes and seeds.
    pub mean_final_accuracy: f64,
    pub failed_cells: usize,
}

/// Final-accuracy score of every `η` in the grid, evaluated in memory.
pub fn grid_eta(config: &ExperimentConfig) -> Result<(Vec<EtaScore>, f64)> {
    let mut scores = Vec::new();
    for &eta in &config.eta_grid {
        let mut cfg = config.clone();
        cfg.eta = eta;
        cfg.smoothness = config.smoothness.map(|_| 1.0 / eta);
        let setup = Setup::build(&cfg)?;
        let mut acc = Vec::new();
        let mut failed = 0;
        for (_, _, res) in run_cells(&setup) {
            match res.ok().and_then(|r| r.last().map(|l| l.test_accuracy)) {
                Some(a) => acc.push(a),
                None => failed += 1,
            }
        }
        let mean = if acc.is_empty() { f64::NAN } else { acc.iter().sum::<f64>() / acc.len() as f64 };
        log::info!("eta {eta}: mean final accuracy {mean:.4}");
        scores.push(EtaScore {
            eta,
            mean_final_accuracy: mean,
            failed_cells: failed,
        });
    }
    let best = scores
        .iter()
        .filter(|s| s.mean_final_accuracy.is_finite())
        .max_by(|a, b| a.mean_final_accuracy.total_cmp(&b.mean_final_accuracy))
        .map(|s| s.eta)
        .ok_or_else(|| Error::Solver("every grid point failed".into()))?;
    Ok((scores, best))
}
