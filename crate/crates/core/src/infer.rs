//! Split-sample post-selection inference.
//!
//! The sample is split into a selection/estimation half `D1` and an inference
//! half `D2`. For a feature `j`, a full model and a null model without `j` are
//! both fit on `D1`; their squared residuals on `D2` are compared through
//! `T = m⁻¹ Σ (Uᵢ² − Vᵢ²)`, and `T` is referred to the distribution obtained
//! by repeatedly splitting the pooled residuals into two random halves.
//! Strongly negative `T` (the full model predicts better) rejects the null.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data;
use crate::error::{NnmrError, Result};
use crate::net::NetworkConfig;
use crate::rng::{derive_seed, rng_from_seed};
use crate::train::{self, FittedModel, TrainConfig};

pub const DEFAULT_PERMUTATIONS: usize = 1000;
pub const MIN_PERMUTATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub d1_x: Array2<f64>,
    pub d1_y: Array1<f64>,
    pub d2_x: Array2<f64>,
    pub d2_y: Array1<f64>,
    /// Original row indices of each half, ascending.
    pub d1_rows: Vec<usize>,
    pub d2_rows: Vec<usize>,
    pub split_seed: u64,
    pub ratio: f64,
}

/// Rows that go to `D1` for a split of `n` rows at `ratio`.
pub fn d1_size(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio).round() as usize
}

/// Uniform random partition with `round(n · ratio)` rows in `D1`.
pub fn split(x: ArrayView2<f64>, y: &Array1<f64>, ratio: f64, seed: u64) -> Result<SplitData> {
    let n = x.nrows();
    if y.len() != n {
        return Err(NnmrError::Shape(format!("{} responses for {n} rows", y.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(NnmrError::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    if n < 4 {
        return Err(NnmrError::Input(format!("need at least 4 rows to split, got {n}")));
    }
    let first = d1_size(n, ratio);
    if first < 2 || n - first < 2 {
        return Err(NnmrError::Input(format!(
            "ratio {ratio} leaves {first} and {} rows; each half needs at least 2",
            n - first
        )));
    }
    let (d1_rows, d2_rows) = data::random_partition(n, first, seed);
    Ok(SplitData {
        d1_x: data::select_rows(x, &d1_rows),
        d1_y: data::select_entries(y, &d1_rows),
        d2_x: data::select_rows(x, &d2_rows),
        d2_y: data::select_entries(y, &d2_rows),
        d1_rows,
        d2_rows,
        split_seed: seed,
        ratio,
    })
}

/// `m⁻¹ Σ (uᵢ² − vᵢ²)`. Negative when `u` holds the smaller residuals.
pub fn ts_statistic(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(NnmrError::Input(format!(
            "residual vectors differ in length: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(NnmrError::Input("residual vectors are empty".into()));
    }
    let sum: f64 = u.iter().zip(v).map(|(a, b)| a * a - b * b).sum();
    Ok(sum / u.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Tested column, in original indexing.
    pub feature: usize,
    pub statistic: f64,
    pub perm_stats: Vec<f64>,
    pub p_perm: f64,
    pub p_gauss: f64,
    pub sigma_hat: f64,
    #[serde(rename = "B")]
    pub b: usize,
    /// Set when every permutation statistic was identical.
    pub degenerate: bool,
}

/// Fraction of permutation statistics strictly below `observed`.
pub fn lower_tail_p(observed: f64, perm_stats: &[f64]) -> f64 {
    perm_stats.iter().filter(|&&t| t < observed).count() as f64 / perm_stats.len() as f64
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Permutation and Gaussian-approximation p-values for residuals `u` (full
/// model) and `v` (null model). Permutation `b` draws from its own stream
/// seeded by `(seed, b)`, so the result does not depend on thread count.
pub fn permutation_test(u: &[f64], v: &[f64], b: usize, seed: u64, feature: usize) -> Result<InferenceResult> {
    if b < MIN_PERMUTATIONS {
        return Err(NnmrError::Config(format!(
            "at least {MIN_PERMUTATIONS} permutations are required, got {b}"
        )));
    }
    let statistic = ts_statistic(u, v)?;
    let m = u.len();
    let pooled: Vec<f64> = u.iter().chain(v).copied().collect();
    let perm_stats: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, k as u64));
            let mut s = pooled.clone();
            s.shuffle(&mut rng);
            let (a, c) = s.split_at(m);
            ts_statistic(a, c).expect("equal halves")
        })
        .collect();
    let p_perm = lower_tail_p(statistic, &perm_stats);
    let sigma_hat = sample_sd(&perm_stats);
    let degenerate = !(sigma_hat > 0.0);
    let p_gauss = if degenerate {
        if statistic >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        Normal::standard().cdf(statistic / sigma_hat)
    };
    Ok(InferenceResult {
        feature,
        statistic,
        perm_stats,
        p_perm,
        p_gauss,
        sigma_hat,
        b,
        degenerate,
    })
}

/// A conditional-mean estimate: a trained network, or the `D1` mean when
/// there is nothing left to condition on.
#[derive(Clone, Debug)]
pub enum Predictor {
    Constant(f64),
    Network(Box<FittedModel>),
}

impl Predictor {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            Predictor::Constant(c) => Ok(Array1::from_elem(x.nrows(), *c)),
            Predictor::Network(m) => m.predict(x),
        }
    }
}

/// Training settings for the inference refits: selection is already done, so
/// the gate penalty is switched off.
pub fn refit_config(train_config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lambda1: 0.0,
        ..train_config.clone()
    }
}

/// Fits the conditional mean of `y` on `columns` using `D1` only.
pub fn fit_predictor(split: &SplitData, columns: &[usize], net_config: &NetworkConfig, train_config: &TrainConfig) -> Result<Predictor> {
    if columns.is_empty() {
        return Ok(Predictor::Constant(split.d1_y.sum() / split.d1_y.len() as f64));
    }
    let model = train::fit_columns(split.d1_x.view(), &split.d1_y, columns, net_config, &refit_config(train_config))?;
    Ok(Predictor::Network(Box::new(model)))
}

fn residuals(split: &SplitData, predictor: &Predictor) -> Result<Vec<f64>> {
    let pred = predictor.predict(split.d2_x.view())?;
    Ok(split.d2_y.iter().zip(&pred).map(|(y, p)| y - p).collect())
}

fn normalized(selected: &[usize]) -> Vec<usize> {
    let mut s = selected.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Column sets `(full, null)` for testing `j` given the selected set: when
/// `j` is selected the null model drops it, otherwise the full model adds it.
pub fn model_columns(selected: &[usize], j: usize) -> (Vec<usize>, Vec<usize>) {
    let s = normalized(selected);
    let without: Vec<usize> = s.iter().copied().filter(|&k| k != j).collect();
    let mut with = without.clone();
    with.push(j);
    with.sort_unstable();
    (with, without)
}

fn check_test_args(split: &SplitData, j: usize, b: usize) -> Result<()> {
    if b < MIN_PERMUTATIONS {
        return Err(NnmrError::Config(format!(
            "at least {MIN_PERMUTATIONS} permutations are required, got {b}"
        )));
    }
    if split.d2_y.len() < 2 {
        return Err(NnmrError::Input("inference half needs at least 2 rows".into()));
    }
    if j >= split.d1_x.ncols() {
        return Err(NnmrError::Input(format!(
            "feature {j} out of range for {} columns",
            split.d1_x.ncols()
        )));
    }
    Ok(())
}

/// Tests `H0: E(Y | X_{S∖j}) = E(Y | X_{S∪j})` for one feature.
pub fn test_feature(
    split: &SplitData,
    selected: &[usize],
    j: usize,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    b: usize,
    perm_seed: u64,
) -> Result<InferenceResult> {
    check_test_args(split, j, b)?;
    let (with, without) = model_columns(selected, j);
    let full = fit_predictor(split, &with, net_config, train_config)?;
    test_with_full(split, &full, &without, j, net_config, train_config, b, perm_seed)
}

#[allow(clippy::too_many_arguments)]
fn test_with_full(
    split: &SplitData,
    full: &Predictor,
    without: &[usize],
    j: usize,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    b: usize,
    perm_seed: u64,
) -> Result<InferenceResult> {
    let null = fit_predictor(split, without, net_config, train_config)?;
    let u = residuals(split, full)?;
    let v = residuals(split, &null)?;
    permutation_test(&u, &v, b, derive_seed(perm_seed, j as u64), j)
}

/// Tests every selected feature. The full model on `S` is fit once and shared;
/// each feature gets its own permutation stream, so results do not depend on
/// the order of `selected`. Output is sorted by feature.
pub fn test_all(
    split: &SplitData,
    selected: &[usize],
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    b: usize,
    seed: u64,
) -> Result<Vec<InferenceResult>> {
    let s = normalized(selected);
    if s.is_empty() {
        return Err(NnmrError::Input("no selected features to test".into()));
    }
    for &j in &s {
        check_test_args(split, j, b)?;
    }
    let full = fit_predictor(split, &s, net_config, train_config)?;
    s.par_iter()
        .map(|&j| {
            let (_, without) = model_columns(&s, j);
            test_with_full(split, &full, &without, j, net_config, train_config, b, seed)
        })
        .collect()
}
