//! The federated learning task: local mini-batch gradients with clipping,
//! global and participation-weighted objectives, and the SGD update.

pub mod data;
pub mod model;

use rand::Rng;

pub use data::{Dataset, GaussianMixture, LocalDataset, PartitionManifest, Sample};
pub use model::{ModelParams, ObjectiveSpec};

use crate::error::{Error, Result};
use crate::linalg;

/// Rescales `g` onto the ball of radius `g_max` when it lies outside.
pub fn clip(mut g: Vec<f64>, g_max: f64) -> Vec<f64> {
    let n = linalg::norm(&g);
    if n > g_max {
        let s = g_max / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
    g
}

/// Full-dataset local loss `f_m(w)` and its (unclipped) gradient.
pub fn full_loss_and_grad(spec: &ObjectiveSpec, w: &ModelParams, dataset: &LocalDataset) -> Result<(f64, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Data(format!("device {} has an empty dataset", dataset.owner)));
    }
    Ok(model::loss_and_grad(spec, w, &dataset.samples))
}

/// Mini-batch gradient drawn without replacement and clipped to `g_max`.
/// `batch_size == D` uses every sample and consumes no randomness.
pub fn local_gradient<R: Rng + ?Sized>(
    spec: &ObjectiveSpec,
    w: &ModelParams,
    dataset: &LocalDataset,
    batch_size: usize,
    g_max: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Data(format!("device {} has an empty dataset", dataset.owner)));
    }
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} outside 1..={}",
            dataset.len()
        )));
    }
    let (_, g) = if batch_size == dataset.len() {
        model::loss_and_grad(spec, w, &dataset.samples)
    } else {
        let idx = rand::seq::index::sample(rng, dataset.len(), batch_size);
        model::loss_and_grad(spec, w, idx.iter().map(|i| &dataset.samples[i]))
    };
    Ok(clip(g, g_max))
}

/// Uniform average of the clipped full-batch local gradients.
pub fn global_gradient(spec: &ObjectiveSpec, w: &ModelParams, datasets: &[LocalDataset], g_max: f64) -> Result<Vec<f64>> {
    let grads = datasets
        .iter()
        .map(|ds| full_loss_and_grad(spec, w, ds).map(|(_, g)| clip(g, g_max)))
        .collect::<Result<Vec<_>>>()?;
    Ok(linalg::mean_of(&grads))
}

/// `w - η · estimate`
pub fn sgd_step(w: &ModelParams, estimate: &[f64], eta: f64) -> ModelParams {
    ModelParams {
        w: w.w.iter().zip(estimate).map(|(a, g)| a - eta * g).collect(),
    }
}

fn check_simplex(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Domain(format!("{} weights for {n} devices", weights.len())));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&p| p < -1e-9 || p > 1.0 + 1e-9) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("weights {weights:?} are not on the simplex")));
    }
    Ok(())
}

/// `Σ_m p_m f_m(w)`; `None` weights give the uniform global objective `F`.
pub fn objective_value(
    spec: &ObjectiveSpec,
    w: &ModelParams,
    datasets: &[LocalDataset],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let n = datasets.len();
    let uniform = vec![1.0 / n as f64; n];
    let weights = weights.unwrap_or(&uniform);
    check_simplex(weights, n)?;
    Ok(datasets
        .iter()
        .zip(weights)
        .map(|(ds, p)| p * model::loss(spec, w, &ds.samples))
        .sum())
}

/// `sqrt((1/N) Σ_m ‖g_m - ḡ‖²)` over clipped full-batch local gradients at `w`.
pub fn estimate_kappa(spec: &ObjectiveSpec, w: &ModelParams, datasets: &[LocalDataset], g_max: f64) -> Result<f64> {
    let grads = datasets
        .iter()
        .map(|ds| full_loss_and_grad(spec, w, ds).map(|(_, g)| clip(g, g_max)))
        .collect::<Result<Vec<_>>>()?;
    Ok(kappa_from_gradients(&grads))
}

pub fn kappa_from_gradients(grads: &[Vec<f64>]) -> f64 {
    let mean = linalg::mean_of(grads);
    (grads
        .iter()
        .map(|g| linalg::norm_sq(&linalg::sub(g, &mean)))
        .sum::<f64>()
        / grads.len() as f64)
        .sqrt()
}

/// Fraction of correctly classified samples.
pub fn accuracy(spec: &ObjectiveSpec, w: &ModelParams, data: &[Sample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data.iter().filter(|s| model::predict(spec, w, &s.x) == s.y).count();
    hits as f64 / data.len() as f64
}
