//! Test-only oracles. Nothing here calls into the library's evaluation code.
#![allow(dead_code)]

pub mod checks;

use ndarray::{Array1, Array2};
use nnmr::net::{NetworkConfig, NetworkParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Parameters with every entry drawn from N(0, scale²); gates and square
/// layers drawn around their anchors.
pub fn random_params(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> NetworkParams {
    let mut p = NetworkParams::zeros(config);
    for block in p.blocks_mut() {
        for v in block.iter_mut() {
            *v = 0.6 * normal(rng);
        }
    }
    for layer in p.hidden_layers.iter_mut() {
        for ((r, c), w) in layer.weights.indexed_iter_mut() {
            if r == c {
                *w += 1.0;
            }
        }
    }
    p
}

pub fn random_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| normal(rng))
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Direct loop evaluation of the layer recursion, returning the output and
/// every hidden pre-activation.
pub fn oracle_forward_traced(p: &NetworkParams, x: &[f64]) -> (f64, Vec<f64>) {
    let mut pre = Vec::new();
    let mut h: Vec<f64> = x.iter().zip(p.gate.iter()).map(|(a, g)| a * g).collect();
    let mut layers = Vec::new();
    if let Some(l) = &p.input_layer {
        layers.push(l);
    }
    layers.extend(p.hidden_layers.iter());
    for layer in layers {
        let mut next = vec![0.0; layer.weights.nrows()];
        for o in 0..layer.weights.nrows() {
            let mut z = layer.bias[o];
            for k in 0..layer.weights.ncols() {
                z += layer.weights[[o, k]] * h[k];
            }
            pre.push(z);
            next[o] = relu(z);
        }
        h = next;
    }
    let mut out = p.output_bias;
    for k in 0..h.len() {
        out += p.output_weights[k] * h[k];
    }
    (out, pre)
}

pub fn oracle_forward(p: &NetworkParams, x: &[f64]) -> f64 {
    oracle_forward_traced(p, x).0
}

/// Mean squared error plus both penalties, by direct summation.
pub fn oracle_objective(p: &NetworkParams, x: &Array2<f64>, y: &Array1<f64>, lambda1: f64, lambda2: f64) -> f64 {
    let n = x.nrows();
    let mut sse = 0.0;
    for i in 0..n {
        let row: Vec<f64> = x.row(i).to_vec();
        let r = y[i] - oracle_forward(p, &row);
        sse += r * r;
    }
    let mut gate = 0.0;
    for a in p.gate.iter() {
        gate += a.abs();
    }
    let mut dp = 0.0;
    for layer in &p.hidden_layers {
        for r in 0..layer.weights.nrows() {
            for c in 0..layer.weights.ncols() {
                let anchor = if r == c { 1.0 } else { 0.0 };
                dp += (layer.weights[[r, c]] - anchor).abs();
            }
            dp += layer.bias[r].abs();
        }
    }
    sse / n as f64 + lambda1 * gate + lambda2 * dp
}

/// Mean of squared-residual differences by an explicit loop.
pub fn oracle_ts(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..u.len() {
        acc += u[i] * u[i] - v[i] * v[i];
    }
    acc / u.len() as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Kolmogorov–Smirnov statistic of `sample` against Uniform(0, 1).
pub fn ks_uniform_statistic(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let lo = v - i as f64 / n;
            let hi = (i as f64 + 1.0) / n - v;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value of `sqrt(n) · D`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let n = n as f64;
    let t = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * t * t).exp();
    }
    p.clamp(0.0, 1.0)
}
