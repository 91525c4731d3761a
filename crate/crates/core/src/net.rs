//! Input-gated ReLU network.
//!
//! The model is `g(x) = h_D ∘ σ ∘ … ∘ σ ∘ h_0(α ⊙ x)` where `α` is a trainable
//! per-feature gate, `h_0` maps the `d` gated inputs to `width` hidden units,
//! the `depth - 1` square hidden maps are anchored at the identity by the depth
//! penalty, and `h_D` reduces to a scalar. A depth of zero degenerates to the
//! linear model `w · (α ⊙ x) + b`.
//!
//! All dense products are written as row-wise axpy loops that accumulate over
//! the reduction index in ascending order and skip exact zeros. This keeps
//! batch and single-row evaluation bit-identical and makes removal of
//! zero-gated columns or identity layers exact.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NnmrError, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Common width of every hidden layer.
    pub width: usize,
    /// Documented sup-norm bound on the network output. Never enforced.
    #[serde(default)]
    pub output_bound: Option<f64>,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, depth: usize, width: usize) -> Result<Self> {
        let config = Self {
            input_dim,
            depth,
            width,
            output_bound: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(NnmrError::Config("input_dim must be at least 1".into()));
        }
        if self.width == 0 {
            return Err(NnmrError::Config("width must be at least 1".into()));
        }
        if let Some(b) = self.output_bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(NnmrError::Config(format!(
                    "output_bound must be positive and finite, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Number of square hidden-to-hidden maps.
    pub fn square_layers(&self) -> usize {
        self.depth.saturating_sub(1)
    }

    /// Length of the output weight row.
    pub fn output_fan_in(&self) -> usize {
        if self.depth == 0 {
            self.input_dim
        } else {
            self.width
        }
    }

    /// Total number of weights and biases, excluding the gate.
    pub fn parameter_count(&self) -> usize {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.width, self.depth));
        dims.push(1);
        dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Same architecture over a different number of inputs.
    pub fn with_input_dim(&self, input_dim: usize) -> Self {
        Self {
            input_dim,
            ..self.clone()
        }
    }
}

/// Weights (out × in, row-major) and bias of one affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineLayer {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn identity(width: usize) -> Self {
        Self {
            weights: Array2::eye(width),
            bias: Array1::zeros(width),
        }
    }

    /// `‖W − I‖₁` for a square layer.
    pub fn distance_from_identity(&self) -> f64 {
        self.weights
            .indexed_iter()
            .map(|((r, c), &w)| if r == c { (w - 1.0).abs() } else { w.abs() })
            .sum()
    }

    pub fn is_identity(&self) -> bool {
        self.weights.is_square()
            && self
                .weights
                .indexed_iter()
                .all(|((r, c), &w)| w == if r == c { 1.0 } else { 0.0 })
            && self.bias.iter().all(|&b| b == 0.0)
    }

    /// Row-wise `input · Wᵀ + c`.
    fn apply(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let n = input.nrows();
        let outputs = self.weights.nrows();
        let wt = self.weights.t().as_standard_layout().into_owned();
        let wt = wt.as_slice().expect("standard layout");
        let input = input.as_standard_layout();
        let bias = self.bias.as_slice().expect("contiguous bias");
        let mut out = Array2::zeros((n, outputs));
        if outputs == 0 {
            return out;
        }
        for (in_row, mut out_row) in input.rows().into_iter().zip(out.rows_mut()) {
            let out_row = out_row.as_slice_mut().expect("standard layout");
            out_row.copy_from_slice(bias);
            for (k, &a) in in_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, &wt[k * outputs..(k + 1) * outputs], out_row);
            }
        }
        out
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn relu_in_place(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Per-feature gate `α`, length `input_dim`.
    pub gate: Array1<f64>,
    /// `input_dim → width` map. Absent when the depth is zero.
    pub input_layer: Option<AffineLayer>,
    /// Square `width × width` maps, `depth - 1` of them.
    pub hidden_layers: Vec<AffineLayer>,
    pub output_weights: Array1<f64>,
    pub output_bias: f64,
}

/// Partial derivatives of a scalar objective, laid out exactly like the
/// parameters they were taken with respect to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub NetworkParams);

impl std::ops::Deref for Gradients {
    type Target = NetworkParams;
    fn deref(&self) -> &NetworkParams {
        &self.0
    }
}

impl std::ops::DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut NetworkParams {
        &mut self.0
    }
}

impl NetworkParams {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let input_layer = (config.depth > 0).then(|| AffineLayer::zeros(config.width, config.input_dim));
        Self {
            gate: Array1::zeros(config.input_dim),
            input_layer,
            hidden_layers: (0..config.square_layers())
                .map(|_| AffineLayer::zeros(config.width, config.width))
                .collect(),
            output_weights: Array1::zeros(config.output_fan_in()),
            output_bias: 0.0,
        }
    }

    /// Gates at one, square layers at the identity plus N(0, 0.01²) noise,
    /// boundary layers He-scaled Gaussian, biases zero.
    pub fn initialize(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut params = Self::zeros(config);
        params.gate.fill(1.0);
        if let Some(layer) = params.input_layer.as_mut() {
            let sd = (2.0 / config.input_dim as f64).sqrt();
            layer
                .weights
                .mapv_inplace(|_| sd * rng.sample::<f64, _>(StandardNormal));
        }
        for layer in params.hidden_layers.iter_mut() {
            for ((r, c), w) in layer.weights.indexed_iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *w = if r == c { 1.0 } else { 0.0 } + 0.01 * noise;
            }
        }
        let sd = (1.0 / config.output_fan_in() as f64).sqrt();
        params
            .output_weights
            .mapv_inplace(|_| sd * rng.sample::<f64, _>(StandardNormal));
        params
    }

    /// Checks every array against `config`.
    pub fn check(&self, config: &NetworkConfig) -> Result<()> {
        let bad = |what: &str, got: String, want: String| {
            Err(NnmrError::Shape(format!("{what}: expected {want}, got {got}")))
        };
        if self.gate.len() != config.input_dim {
            return bad("gate", self.gate.len().to_string(), config.input_dim.to_string());
        }
        match (&self.input_layer, config.depth) {
            (None, 0) => {}
            (Some(layer), depth) if depth > 0 => {
                let want = (config.width, config.input_dim);
                if layer.weights.dim() != want || layer.bias.len() != config.width {
                    return bad(
                        "input layer",
                        format!("{:?}+{}", layer.weights.dim(), layer.bias.len()),
                        format!("{want:?}+{}", config.width),
                    );
                }
            }
            (layer, depth) => {
                return bad(
                    "input layer",
                    format!("present={}", layer.is_some()),
                    format!("present={}", depth > 0),
                )
            }
        }
        if self.hidden_layers.len() != config.square_layers() {
            return bad(
                "hidden layer count",
                self.hidden_layers.len().to_string(),
                config.square_layers().to_string(),
            );
        }
        for (l, layer) in self.hidden_layers.iter().enumerate() {
            if layer.weights.dim() != (config.width, config.width) || layer.bias.len() != config.width {
                return bad(
                    &format!("hidden layer {l}"),
                    format!("{:?}+{}", layer.weights.dim(), layer.bias.len()),
                    format!("({w}, {w})+{w}", w = config.width),
                );
            }
        }
        if self.output_weights.len() != config.output_fan_in() {
            return bad(
                "output weights",
                self.output_weights.len().to_string(),
                config.output_fan_in().to_string(),
            );
        }
        Ok(())
    }

    /// Mutable views over every parameter block, in a fixed order shared by
    /// all `NetworkParams` of the same shape.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(4 + 2 * self.hidden_layers.len());
        out.push(self.gate.as_slice_mut().expect("contiguous"));
        if let Some(layer) = self.input_layer.as_mut() {
            out.push(layer.weights.as_slice_mut().expect("contiguous"));
            out.push(layer.bias.as_slice_mut().expect("contiguous"));
        }
        for layer in self.hidden_layers.iter_mut() {
            out.push(layer.weights.as_slice_mut().expect("contiguous"));
            out.push(layer.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(self.output_weights.as_slice_mut().expect("contiguous"));
        out.push(std::slice::from_mut(&mut self.output_bias));
        out
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(4 + 2 * self.hidden_layers.len());
        out.push(self.gate.as_slice().expect("contiguous"));
        if let Some(layer) = self.input_layer.as_ref() {
            out.push(layer.weights.as_slice().expect("contiguous"));
            out.push(layer.bias.as_slice().expect("contiguous"));
        }
        for layer in self.hidden_layers.iter() {
            out.push(layer.weights.as_slice().expect("contiguous"));
            out.push(layer.bias.as_slice().expect("contiguous"));
        }
        out.push(self.output_weights.as_slice().expect("contiguous"));
        out.push(std::slice::from_ref(&self.output_bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// `Σ_l (‖W_l − I‖₁ + ‖c_l‖₁)` over the square hidden layers.
    pub fn depth_penalty(&self) -> f64 {
        self.hidden_layers
            .iter()
            .map(|l| l.distance_from_identity() + l.bias.iter().map(|b| b.abs()).sum::<f64>())
            .sum()
    }

    pub fn gate_l1(&self) -> f64 {
        self.gate.iter().map(|a| a.abs()).sum()
    }
}

/// Intermediate values of a batch forward pass.
struct Trace {
    gated: Array2<f64>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array2<f64>>,
    /// Post-ReLU activations of each hidden layer.
    act: Vec<Array2<f64>>,
    output: Array1<f64>,
}

fn check_inputs(params: &NetworkParams, config: &NetworkConfig, x: &ArrayView2<f64>) -> Result<()> {
    params.check(config)?;
    if x.ncols() != config.input_dim {
        return Err(NnmrError::Shape(format!(
            "input has {} columns, network expects {}",
            x.ncols(),
            config.input_dim
        )));
    }
    Ok(())
}

fn trace(params: &NetworkParams, x: ArrayView2<f64>) -> Trace {
    let mut gated = x.as_standard_layout().into_owned();
    for mut row in gated.rows_mut() {
        row *= &params.gate;
    }
    let mut pre = Vec::with_capacity(1 + params.hidden_layers.len());
    let mut act: Vec<Array2<f64>> = Vec::with_capacity(1 + params.hidden_layers.len());
    if let Some(input_layer) = &params.input_layer {
        let z = input_layer.apply(gated.view());
        let mut h = z.clone();
        relu_in_place(&mut h);
        pre.push(z);
        act.push(h);
        for layer in &params.hidden_layers {
            let z = layer.apply(act.last().expect("input layer present").view());
            let mut h = z.clone();
            relu_in_place(&mut h);
            pre.push(z);
            act.push(h);
        }
    }
    let last = act.last().unwrap_or(&gated);
    let w = params.output_weights.as_slice().expect("contiguous");
    let output = last
        .rows()
        .into_iter()
        .map(|row| {
            let mut acc = 0.0;
            for (h, wk) in row.iter().zip(w) {
                if *h != 0.0 {
                    acc += h * wk;
                }
            }
            acc + params.output_bias
        })
        .collect();
    Trace {
        gated,
        pre,
        act,
        output,
    }
}

/// Network output for a single input vector.
pub fn forward(params: &NetworkParams, config: &NetworkConfig, x: &[f64]) -> Result<f64> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("one row");
    check_inputs(params, config, &view)?;
    Ok(trace(params, view).output[0])
}

/// Network output for every row of `x`.
pub fn batch_forward(params: &NetworkParams, config: &NetworkConfig, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_inputs(params, config, &x)?;
    if x.nrows() == 0 {
        return Ok(Array1::zeros(0));
    }
    Ok(trace(params, x).output)
}

fn mean_squared_error(y: &Array1<f64>, predictions: &Array1<f64>) -> f64 {
    let sum: f64 = y.iter().zip(predictions).map(|(a, b)| (a - b) * (a - b)).sum();
    sum / y.len() as f64
}

fn penalized(params: &NetworkParams, mse: f64, lambda1: f64, lambda2: f64) -> f64 {
    mse + lambda1 * params.gate_l1() + lambda2 * params.depth_penalty()
}

fn check_objective_args(x: &ArrayView2<f64>, y: &Array1<f64>, lambda1: f64, lambda2: f64) -> Result<()> {
    if x.nrows() == 0 {
        return Err(NnmrError::Input("objective needs at least one observation".into()));
    }
    if y.len() != x.nrows() {
        return Err(NnmrError::Shape(format!(
            "{} responses for {} rows",
            y.len(),
            x.nrows()
        )));
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(NnmrError::Config(format!(
            "penalty weights must be non-negative, got lambda1={lambda1}, lambda2={lambda2}"
        )));
    }
    Ok(())
}

/// `n⁻¹ Σ (yᵢ − g(α ⊙ xᵢ))² + λ₁‖α‖₁ + λ₂ Σ_l (‖W_l − I‖₁ + ‖c_l‖₁)`.
pub fn objective(
    params: &NetworkParams,
    config: &NetworkConfig,
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    check_inputs(params, config, &x)?;
    check_objective_args(&x, y, lambda1, lambda2)?;
    let t = trace(params, x);
    Ok(penalized(params, mean_squared_error(y, &t.output), lambda1, lambda2))
}

/// Objective value and its (sub)gradient. The squared-error part is
/// differentiated exactly; the L1 terms contribute `sign(·)` with `sign(0) = 0`.
pub fn objective_gradient(
    params: &NetworkParams,
    config: &NetworkConfig,
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, Gradients)> {
    check_inputs(params, config, &x)?;
    check_objective_args(&x, y, lambda1, lambda2)?;
    let x = x.as_standard_layout();
    let t = trace(params, x.view());
    let loss = penalized(params, mean_squared_error(y, &t.output), lambda1, lambda2);

    let n = x.nrows();
    let mut grad = NetworkParams::zeros(config);
    // dL/dg_i
    let err: Array1<f64> = y
        .iter()
        .zip(&t.output)
        .map(|(yi, gi)| -2.0 * (yi - gi) / n as f64)
        .collect();

    grad.output_bias = err.sum();
    let last = t.act.last().unwrap_or(&t.gated);
    for (e, row) in err.iter().zip(last.rows()) {
        if *e != 0.0 {
            grad.output_weights.scaled_add(*e, &row);
        }
    }

    match &params.input_layer {
        None => {
            // g = Σ_j w_j α_j x_j + b
            let mut xt_err = Array1::<f64>::zeros(config.input_dim);
            for (e, row) in err.iter().zip(x.rows()) {
                if *e != 0.0 {
                    xt_err.scaled_add(*e, &row);
                }
            }
            grad.gate = &xt_err * &params.output_weights;
            grad.output_weights = &xt_err * &params.gate;
        }
        Some(input_layer) => {
            let width = config.width;
            // Gradient with respect to the last hidden activation.
            let mut d_act = Array2::<f64>::zeros((n, width));
            for (mut row, e) in d_act.rows_mut().into_iter().zip(&err) {
                row.scaled_add(*e, &params.output_weights);
            }
            for l in (0..params.hidden_layers.len()).rev() {
                let d_pre = relu_backward(d_act, &t.pre[l + 1]);
                let layer = &params.hidden_layers[l];
                let g = &mut grad.hidden_layers[l];
                let below = &t.act[l];
                let mut d_below = Array2::<f64>::zeros((n, width));
                for i in 0..n {
                    let dz = d_pre.row(i);
                    let below_row = below.row(i);
                    let mut d_below_row = d_below.row_mut(i);
                    for (o, &v) in dz.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        g.weights.row_mut(o).scaled_add(v, &below_row);
                        g.bias[o] += v;
                        d_below_row.scaled_add(v, &layer.weights.row(o));
                    }
                }
                d_act = d_below;
            }
            let d_pre = relu_backward(d_act, &t.pre[0]);
            // cross[o, j] = Σ_i dZ0[i, o] · x[i, j]
            let d = config.input_dim;
            let mut cross = Array2::<f64>::zeros((width, d));
            {
                let cross_s = cross.as_slice_mut().expect("standard layout");
                let g_bias = &mut grad.input_layer.as_mut().expect("depth > 0").bias;
                for (dz, x_row) in d_pre.rows().into_iter().zip(x.rows()) {
                    let x_row = x_row.to_slice().expect("standard layout");
                    for (o, &v) in dz.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        g_bias[o] += v;
                        axpy(v, x_row, &mut cross_s[o * d..(o + 1) * d]);
                    }
                }
            }
            let g_in = grad.input_layer.as_mut().expect("depth > 0");
            for ((o, j), gw) in g_in.weights.indexed_iter_mut() {
                *gw = params.gate[j] * cross[[o, j]];
            }
            for j in 0..d {
                let mut acc = 0.0;
                for o in 0..width {
                    acc += input_layer.weights[[o, j]] * cross[[o, j]];
                }
                grad.gate[j] = acc;
            }
        }
    }

    if lambda1 > 0.0 {
        for (g, a) in grad.gate.iter_mut().zip(&params.gate) {
            *g += lambda1 * sign(*a);
        }
    }
    if lambda2 > 0.0 {
        for (g, layer) in grad.hidden_layers.iter_mut().zip(&params.hidden_layers) {
            for (((r, c), gw), w) in g.weights.indexed_iter_mut().zip(&layer.weights) {
                let anchor = if r == c { 1.0 } else { 0.0 };
                *gw += lambda2 * sign(w - anchor);
            }
            for (gb, b) in g.bias.iter_mut().zip(&layer.bias) {
                *gb += lambda2 * sign(*b);
            }
        }
    }
    Ok((loss, Gradients(grad)))
}

fn relu_backward(mut d_act: Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    d_act.zip_mut_with(pre, |d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    d_act
}

/// Smallest absolute hidden pre-activation over a batch; `None` at depth zero.
pub fn min_abs_preactivation(params: &NetworkParams, config: &NetworkConfig, x: ArrayView2<f64>) -> Result<Option<f64>> {
    check_inputs(params, config, &x)?;
    let t = trace(params, x);
    Ok(t
        .pre
        .iter()
        .flat_map(|z| z.iter().map(|v| v.abs()))
        .reduce(f64::min))
}
