//! Optimization of the penalized objective with periodic hard-thresholding,
//! pruning of collapsed structure, and validation-based tuning.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Scaling};
use crate::error::{NnmrError, Result};
use crate::net::{self, AffineLayer, Gradients, NetworkConfig, NetworkParams};
use crate::rng::{derive_named, rng_from_seed};

pub use crate::net::objective;

/// Full-batch training is used up to this many rows.
pub const FULL_BATCH_LIMIT: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSize {
    Full,
    #[serde(untagged)]
    Rows(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Gate sparsity weight.
    pub lambda1: f64,
    /// Depth penalty weight.
    pub lambda2: f64,
    /// Gate truncation threshold.
    pub tau1: f64,
    /// Layer truncation threshold on `‖W − I‖₁`.
    pub tau2: f64,
    /// Iterations between truncations.
    pub trunc_period: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub batch_size: BatchSize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Iterations over which the gate penalty ramps linearly from zero to
    /// `lambda1`, giving interaction-only features time to pick up signal.
    pub penalty_warmup: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.01,
            tau1: 0.1,
            tau2: 1e-2,
            trunc_period: 100,
            max_iters: 5000,
            learning_rate: 0.05,
            batch_size: BatchSize::Rows(256),
            seed: 0,
            val_fraction: 0.2,
            penalty_warmup: 2000,
            optimizer: Optimizer::Gd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NnmrError::Config(m));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return fail(format!("lambda1 must be non-negative, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return fail(format!("lambda2 must be non-negative, got {}", self.lambda2));
        }
        if !(self.tau1 >= 0.0 && self.tau2 >= 0.0) {
            return fail(format!("thresholds must be non-negative, got tau1={}, tau2={}", self.tau1, self.tau2));
        }
        if self.trunc_period == 0 {
            return fail("trunc_period must be at least 1".into());
        }
        if self.max_iters == 0 {
            return fail("max_iters must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == BatchSize::Rows(0) {
            return fail("batch_size must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return fail(format!("val_fraction must lie in (0, 0.5], got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// A trained network together with the column mapping and scaling needed to
/// evaluate it on raw data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub params: NetworkParams,
    pub config: NetworkConfig,
    /// Original column indices with a nonzero gate, ascending.
    pub selected: Vec<usize>,
    /// Hidden layers left once identity layers are removed.
    pub pruned_depth: usize,
    /// `(iteration, objective)` for every optimizer step.
    pub train_history: Vec<(usize, f64)>,
    /// Objective on the full training data after the final truncation.
    pub final_objective: f64,
    /// Original column index of each network input.
    pub features: Vec<usize>,
    pub scaling: Scaling,
}

impl FittedModel {
    fn inputs(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if let Some(&max) = self.features.iter().max() {
            if max >= x.ncols() {
                return Err(NnmrError::Shape(format!(
                    "model reads column {max} but the data has {} columns",
                    x.ncols()
                )));
            }
        }
        let cols = data::select_columns(x, &self.features);
        Ok(self.scaling.transform_x(cols.view()))
    }

    /// Network output on the standardized response scale.
    pub fn predict_standardized(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let z = self.inputs(x)?;
        net::batch_forward(&self.params, &self.config, z.view())
    }

    /// Predictions on the original response scale. `x` holds all original
    /// columns; the model picks its own.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.scaling.inverse_y(&self.predict_standardized(x)?))
    }
}

/// Which coordinates a truncation zeroed or reset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Truncated {
    pub gates: Vec<usize>,
    pub layers: Vec<usize>,
}

/// Zeroes gates with `|α_j| ≤ τ₁` and resets square layers with
/// `‖W_l − I‖₁ ≤ τ₂` to `(I, 0)`. Reports only entries that actually changed.
pub fn truncate_in_place(params: &mut NetworkParams, tau1: f64, tau2: f64) -> Truncated {
    let mut out = Truncated::default();
    for (j, a) in params.gate.iter_mut().enumerate() {
        if a.abs() <= tau1 && *a != 0.0 {
            *a = 0.0;
            out.gates.push(j);
        } else if *a == 0.0 {
            // normalizes -0.0
            *a = 0.0;
        }
    }
    for (l, layer) in params.hidden_layers.iter_mut().enumerate() {
        if layer.distance_from_identity() <= tau2 && !layer.is_identity() {
            *layer = AffineLayer::identity(layer.weights.nrows());
            out.layers.push(l);
        }
    }
    out
}

pub fn truncate(params: &NetworkParams, config: &NetworkConfig, tau1: f64, tau2: f64) -> Result<NetworkParams> {
    params.check(config)?;
    if !(tau1 >= 0.0 && tau2 >= 0.0) {
        return Err(NnmrError::Config(format!(
            "thresholds must be non-negative, got tau1={tau1}, tau2={tau2}"
        )));
    }
    let mut out = params.clone();
    truncate_in_place(&mut out, tau1, tau2);
    Ok(out)
}

/// Update rule applied to the subgradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient steps.
    Gd,
    /// Adam with β = (0.9, 0.999) and ε = 1e-8.
    Adam,
}

/// Adam with per-coordinate step counts so that a reset coordinate restarts
/// its bias correction.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: NetworkParams,
    v: NetworkParams,
    steps: NetworkParams,
}

impl Adam {
    fn new(config: &NetworkConfig, lr: f64) -> Self {
        let zeros = NetworkParams::zeros(config);
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros.clone(),
            steps: zeros,
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &Gradients, frozen: &[bool]) {
        let (b1, b2) = (self.beta1, self.beta2);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
            .zip(self.steps.blocks_mut());
        for (block, ((((p, g), m), v), t)) in blocks.enumerate() {
            for i in 0..p.len() {
                // block 0 is the gate
                if block == 0 && frozen[i] {
                    continue;
                }
                t[i] += 1.0;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - b1.powf(t[i]));
                let v_hat = v[i] / (1.0 - b2.powf(t[i]));
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    fn reset(&mut self, truncated: &Truncated) {
        for state in [&mut self.m, &mut self.v, &mut self.steps] {
            for &j in &truncated.gates {
                state.gate[j] = 0.0;
            }
            for &l in &truncated.layers {
                let layer = &mut state.hidden_layers[l];
                layer.weights.fill(0.0);
                layer.bias.fill(0.0);
            }
        }
    }
}

fn gradient_step(params: &mut NetworkParams, grads: &Gradients, frozen: &[bool], lr: f64) {
    for (block, (p, g)) in params.blocks_mut().into_iter().zip(grads.blocks()).enumerate() {
        for i in 0..p.len() {
            if block == 0 && frozen[i] {
                continue;
            }
            p[i] -= lr * g[i];
        }
    }
}

fn remaining_depth(params: &NetworkParams, config: &NetworkConfig) -> usize {
    if config.depth == 0 {
        0
    } else {
        1 + params.hidden_layers.iter().filter(|l| !l.is_identity()).count()
    }
}

fn nonzero_features(params: &NetworkParams, features: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = params
        .gate
        .iter()
        .zip(features)
        .filter(|(a, _)| **a != 0.0)
        .map(|(_, &j)| j)
        .collect();
    s.sort_unstable();
    s
}

fn validate_fit_inputs(x: ArrayView2<f64>, y: &Array1<f64>, net_config: &NetworkConfig, train_config: &TrainConfig) -> Result<()> {
    net_config.validate()?;
    train_config.validate()?;
    if x.nrows() < 2 {
        return Err(NnmrError::Input(format!("need at least 2 observations, got {}", x.nrows())));
    }
    if y.len() != x.nrows() {
        return Err(NnmrError::Shape(format!("{} responses for {} rows", y.len(), x.nrows())));
    }
    if x.ncols() != net_config.input_dim {
        return Err(NnmrError::Shape(format!(
            "data has {} columns, network expects {}",
            x.ncols(),
            net_config.input_dim
        )));
    }
    data::check_finite(x, y)
}

/// Trains on every column of `x`.
pub fn fit(x: ArrayView2<f64>, y: &Array1<f64>, net_config: &NetworkConfig, train_config: &TrainConfig) -> Result<FittedModel> {
    let features: Vec<usize> = (0..x.ncols()).collect();
    fit_inner(x, y, features, net_config, train_config)
}

/// Trains on the listed columns of `x` only; the model keeps the original
/// column indices.
pub fn fit_columns(
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    columns: &[usize],
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
) -> Result<FittedModel> {
    if let Some(&bad) = columns.iter().find(|&&j| j >= x.ncols()) {
        return Err(NnmrError::Input(format!("column {bad} out of range for {} columns", x.ncols())));
    }
    let sub = data::select_columns(x, columns);
    let config = net_config.with_input_dim(columns.len());
    fit_inner(sub.view(), y, columns.to_vec(), &config, train_config)
}

fn fit_inner(
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    features: Vec<usize>,
    net_config: &NetworkConfig,
    tc: &TrainConfig,
) -> Result<FittedModel> {
    validate_fit_inputs(x, y, net_config, tc)?;
    let scaling = Scaling::fit(x, y);
    let xs = scaling.transform_x(x);
    let ys = scaling.transform_y(y);
    let n = xs.nrows();

    let mut params = NetworkParams::initialize(net_config, derive_named(tc.seed, "init"));
    for (j, &c) in scaling.constant.iter().enumerate() {
        if c {
            log::warn!("column {} is constant; its gate is fixed at zero", features[j]);
            params.gate[j] = 0.0;
        }
    }
    let frozen = scaling.constant.clone();

    let batch = match tc.batch_size {
        BatchSize::Rows(b) if n > FULL_BATCH_LIMIT => Some(b.min(n)),
        _ => None,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut batch_rng = rng_from_seed(derive_named(tc.seed, "batches"));

    let mut adam = match tc.optimizer {
        Optimizer::Adam => Some(Adam::new(net_config, tc.learning_rate)),
        Optimizer::Gd => None,
    };
    let mut history = Vec::with_capacity(tc.max_iters);
    for iter in 1..=tc.max_iters {
        let lambda1 = if iter < tc.penalty_warmup {
            tc.lambda1 * iter as f64 / tc.penalty_warmup as f64
        } else {
            tc.lambda1
        };
        let (loss, grads) = match batch {
            None => net::objective_gradient(&params, net_config, xs.view(), &ys, lambda1, tc.lambda2)?,
            Some(b) => {
                if cursor + b > n {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                let rows = &order[cursor..cursor + b];
                cursor += b;
                let bx = data::select_rows(xs.view(), rows);
                let by = data::select_entries(&ys, rows);
                net::objective_gradient(&params, net_config, bx.view(), &by, lambda1, tc.lambda2)?
            }
        };
        if !loss.is_finite() {
            return Err(NnmrError::Diverged { iteration: iter, value: loss });
        }
        history.push((iter, loss));
        match adam.as_mut() {
            Some(a) => a.step(&mut params, &grads, &frozen),
            None => gradient_step(&mut params, &grads, &frozen, tc.learning_rate),
        }
        if !params.is_finite() {
            return Err(NnmrError::Diverged { iteration: iter, value: f64::NAN });
        }
        if iter % tc.trunc_period == 0 {
            let t = truncate_in_place(&mut params, tc.tau1, tc.tau2);
            if let Some(a) = adam.as_mut() {
                a.reset(&t);
            }
        }
    }
    truncate_in_place(&mut params, tc.tau1, tc.tau2);
    let final_objective = net::objective(&params, net_config, xs.view(), &ys, tc.lambda1, tc.lambda2)?;
    if !final_objective.is_finite() {
        return Err(NnmrError::Diverged {
            iteration: tc.max_iters,
            value: final_objective,
        });
    }

    Ok(FittedModel {
        selected: nonzero_features(&params, &features),
        pruned_depth: remaining_depth(&params, net_config),
        params,
        config: net_config.clone(),
        train_history: history,
        final_objective,
        features,
        scaling,
    })
}

/// Drops identity hidden layers and zero-gated input columns. Predictions on
/// the surviving columns are unchanged bit for bit. A model with no nonzero
/// gate keeps its columns, since it is constant anyway.
pub fn prune(model: &FittedModel) -> FittedModel {
    let mut out = model.clone();
    out.params.hidden_layers.retain(|l| !l.is_identity());
    if out.config.depth > 0 {
        out.config.depth = 1 + out.params.hidden_layers.len();
    }

    let keep: Vec<usize> = (0..out.params.gate.len())
        .filter(|&j| out.params.gate[j] != 0.0)
        .collect();
    if !keep.is_empty() && keep.len() < out.params.gate.len() {
        let p = &mut out.params;
        p.gate = keep.iter().map(|&j| p.gate[j]).collect();
        match p.input_layer.as_mut() {
            Some(layer) => layer.weights = layer.weights.select(ndarray::Axis(1), &keep),
            None => p.output_weights = keep.iter().map(|&j| p.output_weights[j]).collect(),
        }
        out.features = keep.iter().map(|&j| model.features[j]).collect();
        out.scaling = model.scaling.restrict(&keep);
        out.config.input_dim = keep.len();
    }
    out.pruned_depth = out.config.depth;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau1: f64,
}

impl GridPoint {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau1: self.tau1,
            ..base.clone()
        }
    }
}

/// Default tuning grid.
pub fn default_grid() -> Vec<GridPoint> {
    [1e-3, 1e-2, 5e-2, 1e-1]
        .into_iter()
        .map(|tau1| GridPoint {
            lambda1: 0.1,
            lambda2: 0.01,
            tau1,
        })
        .collect()
}

/// Index of the smallest finite score; exact ties go to the larger `λ₁`,
/// then the larger `λ₂`.
pub fn select_best(grid: &[GridPoint], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (g, &s)) in grid.iter().zip(scores).enumerate() {
        if !s.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bg, bs) = (&grid[b], scores[b]);
                let better = s < bs
                    || (s == bs && (g.lambda1 > bg.lambda1 || (g.lambda1 == bg.lambda1 && g.lambda2 > bg.lambda2)));
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// Held-out performance of one grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEvaluation {
    pub point: GridPoint,
    /// Validation mean squared error; `+∞` if the fit diverged.
    pub mse: f64,
    /// Standard error of `mse` over validation rows.
    pub se: f64,
    /// Features kept by the fitted model.
    pub selected: usize,
}

/// One-standard-error rule: among grid points whose validation error is
/// within one standard error of the best, take the one keeping the fewest
/// features, then the larger `τ₁`, `λ₁`, `λ₂`, then the lower error.
pub fn select_one_se(evals: &[GridEvaluation]) -> Option<usize> {
    let grid: Vec<GridPoint> = evals.iter().map(|e| e.point).collect();
    let scores: Vec<f64> = evals.iter().map(|e| e.mse).collect();
    let best = select_best(&grid, &scores)?;
    let limit = evals[best].mse + evals[best].se;
    let key = |e: &GridEvaluation| (e.selected, -e.point.tau1, -e.point.lambda1, -e.point.lambda2, e.mse);
    (0..evals.len())
        .filter(|&i| evals[i].mse.is_finite() && evals[i].mse <= limit)
        .min_by(|&i, &j| {
            let (a, b) = (key(&evals[i]), key(&evals[j]));
            a.0.cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
                .then(a.3.total_cmp(&b.3))
                .then(a.4.total_cmp(&b.4))
        })
}

/// Fits every grid point on a training part and scores it on the held-out
/// part, in grid order. Diverged fits score `+∞`.
pub fn evaluate_grid(
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    net_config: &NetworkConfig,
    grid: &[GridPoint],
    base: &TrainConfig,
) -> Result<Vec<GridEvaluation>> {
    base.validate()?;
    let n = x.nrows();
    let n_val = ((n as f64 * base.val_fraction).round() as usize).max(1);
    if n < n_val + 2 {
        return Err(NnmrError::Input(format!("{n} rows are too few to hold out a validation split")));
    }
    let (val_rows, train_rows) = data::random_partition(n, n_val, derive_named(base.seed, "tune-split"));
    let xt = data::select_rows(x, &train_rows);
    let yt = data::select_entries(y, &train_rows);
    let xv = data::select_rows(x, &val_rows);
    let yv = data::select_entries(y, &val_rows);

    grid.par_iter()
        .map(|&point| match fit(xt.view(), &yt, net_config, &point.apply(base)) {
            Ok(model) => {
                let pruned = prune(&model);
                let pred = pruned.predict(xv.view())?;
                let sq: Vec<f64> = yv.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).collect();
                let m = sq.len() as f64;
                let mse = sq.iter().sum::<f64>() / m;
                let se = if sq.len() > 1 {
                    (sq.iter().map(|e| (e - mse) * (e - mse)).sum::<f64>() / (m - 1.0) / m).sqrt()
                } else {
                    0.0
                };
                Ok(GridEvaluation {
                    point,
                    mse,
                    se,
                    selected: pruned.selected.len(),
                })
            }
            Err(NnmrError::Diverged { iteration, .. }) => {
                log::warn!("grid point {point:?} diverged at iteration {iteration}");
                Ok(GridEvaluation {
                    point,
                    mse: f64::INFINITY,
                    se: 0.0,
                    selected: 0,
                })
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Grid search over `(λ₁, λ₂, τ₁)` using held-out mean squared error of the
/// fitted-then-pruned model and the one-standard-error rule.
pub fn tune(
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    net_config: &NetworkConfig,
    grid: &[GridPoint],
    base: &TrainConfig,
) -> Result<TrainConfig> {
    if grid.is_empty() {
        return Err(NnmrError::Input("tuning grid is empty".into()));
    }
    if grid.len() == 1 {
        return Ok(grid[0].apply(base));
    }
    let evals = evaluate_grid(x, y, net_config, grid, base)?;
    let best = select_one_se(&evals)
        .ok_or_else(|| NnmrError::Diverged { iteration: base.max_iters, value: f64::INFINITY })?;
    Ok(grid[best].apply(base))
}
