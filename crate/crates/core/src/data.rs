use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{NnmrError, Result};
use crate::rng::rng_from_seed;

/// Per-column centering and scaling of the inputs and the response.
///
/// Columns with zero spread keep a scale of one and are flagged constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
    pub constant: Vec<bool>,
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

impl Scaling {
    pub fn fit(x: ArrayView2<f64>, y: &Array1<f64>) -> Self {
        let mut x_mean = Vec::with_capacity(x.ncols());
        let mut x_sd = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let (m, s) = mean_sd(col.iter().copied());
            let is_constant = !(s > 1e-12 * m.abs().max(1.0));
            x_mean.push(m);
            x_sd.push(if is_constant { 1.0 } else { s });
            constant.push(is_constant);
        }
        let (y_mean, y_sd) = mean_sd(y.iter().copied());
        let y_sd = if y_sd > 0.0 { y_sd } else { 1.0 };
        Self {
            x_mean,
            x_sd,
            y_mean,
            y_sd,
            constant,
        }
    }

    pub fn transform_x(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.as_standard_layout().into_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if self.constant[j] {
                    0.0
                } else {
                    (*v - self.x_mean[j]) / self.x_sd[j]
                };
            }
        }
        out
    }

    pub fn transform_y(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| (v - self.y_mean) / self.y_sd)
    }

    pub fn inverse_y(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| v * self.y_sd + self.y_mean)
    }

    /// Keeps only the listed input columns.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        Self {
            x_mean: keep.iter().map(|&j| self.x_mean[j]).collect(),
            x_sd: keep.iter().map(|&j| self.x_sd[j]).collect(),
            y_mean: self.y_mean,
            y_sd: self.y_sd,
            constant: keep.iter().map(|&j| self.constant[j]).collect(),
        }
    }
}

pub fn select_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

pub fn select_columns(x: ArrayView2<f64>, cols: &[usize]) -> Array2<f64> {
    x.select(Axis(1), cols)
}

pub fn select_entries(y: &Array1<f64>, rows: &[usize]) -> Array1<f64> {
    y.select(Axis(0), rows)
}

/// Uniform random partition of `0..n` into a part of `first` rows and the
/// rest. Both parts are returned in ascending order.
pub fn random_partition(n: usize, first: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(first <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut a = idx[..first].to_vec();
    let mut b = idx[first..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

pub fn check_finite(x: ArrayView2<f64>, y: &Array1<f64>) -> Result<()> {
    if let Some(((i, j), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(NnmrError::Input(format!("non-finite value {v} at row {i}, column {j}")));
    }
    if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(NnmrError::Input(format!("non-finite response {v} at row {i}")));
    }
    Ok(())
}

pub fn mean_squared_error(y: &Array1<f64>, predictions: &Array1<f64>) -> f64 {
    let sum: f64 = y.iter().zip(predictions).map(|(a, b)| (a - b) * (a - b)).sum();
    sum / y.len() as f64
}
