//! Datasets, the synthetic Gaussian-mixture task, file loaders and the
//! label-skewed partition across devices.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, n_classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.y >= n_classes) {
            return Err(Error::Data(format!("label {} outside 0..{n_classes}", s.y)));
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| s.x.len() != first.x.len()) {
                return Err(Error::Data("samples have inconsistent feature dimension".into()));
            }
        }
        Ok(Self { samples, n_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.n_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by[s.y].push(i);
        }
        by
    }

    /// Stratified hold-out: `fraction` of every class goes to the second set.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("hold-out fraction {fraction} outside [0, 1)")));
        }
        let mut rng = stream(seed, 1, 0, Purpose::Dataset);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for mut idx in self.indices_by_label() {
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * fraction).round() as usize;
            let (te, tr) = idx.split_at(n_test);
            test.extend(te.iter().map(|&i| self.samples[i].clone()));
            train.extend(tr.iter().map(|&i| self.samples[i].clone()));
        }
        Ok((
            Dataset::new(train, self.n_classes)?,
            Dataset::new(test, self.n_classes)?,
        ))
    }
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of the class-mean coordinates.
    pub separation: f64,
    pub noise_std: f64,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self {
            n_classes: 10,
            dim: 20,
            per_class: 250,
            separation: 1.0,
            noise_std: 1.0,
        }
    }
}

impl GaussianMixture {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.n_classes < 2 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::Config(format!("degenerate mixture {self:?}")));
        }
        let mut rng = stream(seed, 0, 0, Purpose::Dataset);
        let means: Vec<Vec<f64>> = (0..self.n_classes)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut samples = Vec::with_capacity(self.n_classes * self.per_class);
        for (y, mu) in means.iter().enumerate() {
            for _ in 0..self.per_class {
                let x = mu
                    .iter()
                    .map(|m| m + self.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample { x, y });
            }
        }
        Dataset::new(samples, self.n_classes)
    }
}

/// Reads `label,f1,f2,...` lines. Blank lines and lines starting with `#` are skipped.
pub fn load_csv(path: &Path, n_classes: usize) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let bad = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), lineno + 1));
        let y: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("unreadable label"))?;
        let x = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("unreadable feature"))?;
        samples.push(Sample { x, y });
    }
    Dataset::new(samples, n_classes)
}

fn read_be_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Loads an IDX image/label pair (the MNIST distribution format). Pixels are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path, n_classes: usize) -> Result<Dataset> {
    let mut img = BufReader::new(std::fs::File::open(images)?);
    let mut lab = BufReader::new(std::fs::File::open(labels)?);
    if read_be_u32(&mut img)? != 0x0000_0803 {
        return Err(Error::Data(format!("{} is not an IDX3 image file", images.display())));
    }
    if read_be_u32(&mut lab)? != 0x0000_0801 {
        return Err(Error::Data(format!("{} is not an IDX1 label file", labels.display())));
    }
    let n = read_be_u32(&mut img)? as usize;
    let rows = read_be_u32(&mut img)? as usize;
    let cols = read_be_u32(&mut img)? as usize;
    if read_be_u32(&mut lab)? as usize != n {
        return Err(Error::Data("image and label counts differ".into()));
    }
    let mut pixels = vec![0u8; rows * cols];
    let mut label = [0u8; 1];
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        img.read_exact(&mut pixels)?;
        lab.read_exact(&mut label)?;
        samples.push(Sample {
            x: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            y: label[0] as usize,
        });
    }
    Dataset::new(samples, n_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub owner: usize,
    pub labels: Vec<usize>,
    /// Positions of the samples in the partitioned dataset.
    pub indices: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Label-skewed split: every device holds exactly `labels_per_device` labels,
/// no label is held by more than two devices, and all devices get the same
/// number of samples.
pub fn partition_noniid(
    data: &Dataset,
    n_devices: usize,
    labels_per_device: usize,
    seed: u64,
) -> Result<Vec<LocalDataset>> {
    let c = data.n_classes;
    let slots = n_devices * labels_per_device;
    if n_devices == 0 || labels_per_device == 0 {
        return Err(Error::Infeasible("need at least one device and one label per device".into()));
    }
    if labels_per_device > c {
        return Err(Error::Infeasible(format!(
            "{labels_per_device} labels per device but only {c} classes"
        )));
    }
    if slots < c {
        return Err(Error::Infeasible(format!(
            "{n_devices} devices x {labels_per_device} labels cannot cover {c} classes"
        )));
    }
    if slots > 2 * c {
        return Err(Error::Infeasible(format!(
            "{n_devices} devices x {labels_per_device} labels would place some label on more than two devices ({c} classes)"
        )));
    }
    let mut rng = stream(seed, 0, 0, Purpose::Partition);
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    // slot s belongs to device s / k and carries label order[s mod C]
    let slot_label = |s: usize| order[s % c];
    let mut multiplicity = vec![0usize; c];
    for s in 0..slots {
        multiplicity[slot_label(s)] += 1;
    }
    let mut pools = data.indices_by_label();
    for p in pools.iter_mut() {
        p.shuffle(&mut rng);
    }
    let quota = (0..c)
        .filter(|&l| multiplicity[l] > 0)
        .map(|l| pools[l].len() / multiplicity[l])
        .min()
        .unwrap_or(0);
    if quota == 0 {
        return Err(Error::Infeasible("some label has too few samples to share".into()));
    }
    let mut used = vec![0usize; c];
    let mut out: Vec<LocalDataset> = (0..n_devices)
        .map(|m| LocalDataset {
            owner: m,
            labels: Vec::new(),
            indices: Vec::new(),
            samples: Vec::new(),
        })
        .collect();
    for s in 0..slots {
        let l = slot_label(s);
        let dev = &mut out[s / labels_per_device];
        dev.labels.push(l);
        let take = &pools[l][used[l]..used[l] + quota];
        used[l] += quota;
        dev.indices.extend_from_slice(take);
        dev.samples.extend(take.iter().map(|&i| data.samples[i].clone()));
    }
    for dev in out.iter_mut() {
        dev.labels.sort_unstable();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub labels_per_device: usize,
    pub devices: Vec<DeviceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub device: usize,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl PartitionManifest {
    pub fn from_partition(parts: &[LocalDataset], labels_per_device: usize) -> Self {
        Self {
            labels_per_device,
            devices: parts
                .iter()
                .map(|p| DeviceEntry {
                    device: p.owner,
                    labels: p.labels.clone(),
                    indices: p.indices.clone(),
                })
                .collect(),
        }
    }
}
