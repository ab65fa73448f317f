//! Small dense vector helpers.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scale(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| a * v).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Uniform average of equally sized vectors.
pub fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs.first().map_or(0, Vec::len)];
    for v in vs {
        axpy(1.0, v, &mut out);
    }
    let n = vs.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Weighted sum `Σ w_i v_i`.
pub fn weighted_sum(weights: &[f64], vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs.first().map_or(0, Vec::len)];
    for (w, v) in weights.iter().zip(vs) {
        axpy(*w, v, &mut out);
    }
    out
}
