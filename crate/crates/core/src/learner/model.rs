//! Fully connected ReLU network with softmax cross-entropy and L2 penalty.
//!
//! Parameters are stored flat, layer by layer: the weight matrix row-major
//! `[out][in]` followed by the bias vector `[out]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub input_dim: usize,
    /// Hidden layer widths; empty gives multinomial logistic regression.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    /// Coefficient λ of the per-sample penalty `λ/2 ‖w‖²`.
    pub l2: f64,
}

impl ObjectiveSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, n_classes: usize, l2: f64) -> Result<Self> {
        if input_dim == 0 || n_classes < 2 || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "invalid architecture: input {input_dim}, hidden {hidden:?}, classes {n_classes}"
            )));
        }
        if !(l2 >= 0.0) {
            return Err(Error::Config(format!("l2 coefficient must be >= 0, got {l2}")));
        }
        Ok(Self {
            input_dim,
            hidden,
            n_classes,
            l2,
        })
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.n_classes);
        w
    }

    /// Number of trainable parameters.
    pub fn dim(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Seeded Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = stream(seed, 0, 0, Purpose::Init);
        let mut w = Vec::with_capacity(self.dim());
        for win in self.widths().windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                w.push(s * z);
            }
            w.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ModelParams { w }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(d: usize) -> Self {
        Self { w: vec![0.0; d] }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }
}

struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

fn layers(spec: &ObjectiveSpec) -> Vec<Layer> {
    let mut offset = 0;
    spec.widths()
        .windows(2)
        .map(|w| {
            let l = Layer {
                fan_in: w[0],
                fan_out: w[1],
                offset,
            };
            offset += w[0] * w[1] + w[1];
            l
        })
        .collect()
}

fn forward(spec: &ObjectiveSpec, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let ls = layers(spec);
    let mut acts = vec![x.to_vec()];
    for (i, l) in ls.iter().enumerate() {
        let input = acts.last().unwrap();
        let weights = &w[l.offset..l.offset + l.fan_in * l.fan_out];
        let bias = &w[l.offset + l.fan_in * l.fan_out..l.offset + l.fan_in * l.fan_out + l.fan_out];
        let mut out: Vec<f64> = (0..l.fan_out)
            .map(|o| {
                let row = &weights[o * l.fan_in..(o + 1) * l.fan_in];
                bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        if i + 1 < ls.len() {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(out);
    }
    acts
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Predicted class of one feature vector.
pub fn predict(spec: &ObjectiveSpec, params: &ModelParams, x: &[f64]) -> usize {
    let acts = forward(spec, &params.w, x);
    let logits = acts.last().unwrap();
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Cross-entropy of one sample without the penalty; adds its gradient into `grad`.
fn accumulate(spec: &ObjectiveSpec, w: &[f64], sample: &Sample, grad: &mut [f64]) -> f64 {
    let ls = layers(spec);
    let acts = forward(spec, w, &sample.x);
    let logp = log_softmax(acts.last().unwrap());
    let loss = -logp[sample.y];
    // dL/dlogits = softmax - onehot
    let mut delta: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    delta[sample.y] -= 1.0;
    for (i, l) in ls.iter().enumerate().rev() {
        let input = &acts[i];
        let wo = l.offset;
        let bo = l.offset + l.fan_in * l.fan_out;
        for o in 0..l.fan_out {
            let dv = delta[o];
            if dv == 0.0 {
                continue;
            }
            let row = &mut grad[wo + o * l.fan_in..wo + (o + 1) * l.fan_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += dv * a;
            }
            grad[bo + o] += dv;
        }
        if i > 0 {
            let weights = &w[wo..bo];
            let mut prev = vec![0.0; l.fan_in];
            for o in 0..l.fan_out {
                let dv = delta[o];
                if dv == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&weights[o * l.fan_in..(o + 1) * l.fan_in]) {
                    *p += dv * wv;
                }
            }
            // ReLU mask of the hidden activation feeding this layer
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    loss
}

/// Mean sample loss over `samples` (penalty included) and its gradient.
pub fn loss_and_grad<'a, I>(spec: &ObjectiveSpec, params: &ModelParams, samples: I) -> (f64, Vec<f64>)
where
    I: IntoIterator<Item = &'a Sample>,
{
    let w = &params.w;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    let mut n = 0usize;
    for s in samples {
        loss += accumulate(spec, w, s, &mut grad);
        n += 1;
    }
    let inv = 1.0 / n.max(1) as f64;
    let reg = 0.5 * spec.l2 * crate::linalg::norm_sq(w);
    for (g, wv) in grad.iter_mut().zip(w) {
        *g = *g * inv + spec.l2 * wv;
    }
    (loss * inv + reg, grad)
}

/// Mean sample loss over `samples`, penalty included.
pub fn loss<'a, I>(spec: &ObjectiveSpec, params: &ModelParams, samples: I) -> f64
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let acts = forward(spec, &params.w, &s.x);
        total -= log_softmax(acts.last().unwrap())[s.y];
        n += 1;
    }
    total / n.max(1) as f64 + 0.5 * spec.l2 * crate::linalg::norm_sq(&params.w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_of_default_architecture() {
        let spec = ObjectiveSpec::new(20, vec![32], 10, 0.01).unwrap();
        assert_eq!(spec.dim(), 20 * 32 + 32 + 32 * 10 + 10);
        assert_eq!(spec.init(1).w.len(), spec.dim());
        assert_eq!(spec.init(1), spec.init(1));
    }

    #[test]
    fn linear_softmax_matches_closed_form() {
        // logits = W x + b; dCE/dW = (softmax - e_y) x^T, dCE/db = softmax - e_y
        let spec = ObjectiveSpec::new(3, vec![], 2, 0.0).unwrap();
        let params = ModelParams {
            w: vec![0.2, -0.1, 0.4, -0.3, 0.5, 0.1, 0.05, -0.02],
        };
        let s = Sample {
            x: vec![1.0, 2.0, -1.0],
            y: 1,
        };
        let z0: f64 = 0.2 * 1.0 - 0.1 * 2.0 + 0.4 * -1.0 + 0.05;
        let z1: f64 = -0.3 * 1.0 + 0.5 * 2.0 + 0.1 * -1.0 - 0.02;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let p1 = 1.0 - p0;
        let e = [p0, p1 - 1.0];
        let want = [
            e[0] * 1.0,
            e[0] * 2.0,
            e[0] * -1.0,
            e[1] * 1.0,
            e[1] * 2.0,
            e[1] * -1.0,
            e[0],
            e[1],
        ];
        let (l, g) = loss_and_grad(&spec, &params, [&s]);
        assert!((l + p1.ln()).abs() < 1e-12);
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn penalty_enters_loss_and_gradient() {
        let spec = ObjectiveSpec::new(2, vec![], 2, 0.5).unwrap();
        let params = ModelParams {
            w: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        };
        let s = Sample { x: vec![0.0, 0.0], y: 0 };
        let (l, g) = loss_and_grad(&spec, &params, [&s]);
        assert!((l - (2f64.ln() + 0.25 * 2.0)).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((loss(&spec, &params, [&s]) - l).abs() < 1e-12);
    }
}
