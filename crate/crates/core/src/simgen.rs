//! Synthetic benchmark, selection scoring, and multi-replicate studies.
//!
//! The benchmark draws `X ~ N(0, I_d)` and
//! `Y = X0³ (X2² + X5) − |X7| cos(X8) + σ ε`, so only columns
//! `{0, 2, 5, 7, 8}` carry signal. Every replicate derives its seeds from the
//! master seed and its own index, so studies can be extended or run in
//! parallel without changing earlier records.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NnmrError, Result};
use crate::infer::{self, InferenceResult};
use crate::net::NetworkConfig;
use crate::rng::{derive_named, derive_seed, rng_from_seed};
use crate::train::{self, GridPoint, TrainConfig};

/// Columns that enter the benchmark response.
pub const TRUTH: [usize; 5] = [0, 2, 5, 7, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n: usize,
    pub d: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn truth(&self) -> Vec<usize> {
        TRUTH.to_vec()
    }

    fn validate(&self) -> Result<()> {
        if self.d < 9 {
            return Err(NnmrError::Input(format!(
                "the benchmark needs at least 9 columns, got {}",
                self.d
            )));
        }
        if self.n == 0 {
            return Err(NnmrError::Input("the benchmark needs at least one row".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(NnmrError::Config(format!("noise_sd must be non-negative, got {}", self.noise_sd)));
        }
        Ok(())
    }
}

/// Noise-free benchmark response for one row.
pub fn benchmark_mean(x: &[f64]) -> f64 {
    x[0].powi(3) * (x[2] * x[2] + x[5]) - x[7].abs() * x[8].cos()
}

pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<(Array2<f64>, Array1<f64>)> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let x = Array2::from_shape_fn((spec.n, spec.d), |_| rng.sample::<f64, _>(StandardNormal));
    let y = x
        .rows()
        .into_iter()
        .map(|row| {
            let eps: f64 = rng.sample(StandardNormal);
            benchmark_mean(row.as_slice().expect("standard layout")) + spec.noise_sd * eps
        })
        .collect();
    Ok((x, y))
}

/// Benchmark data in which column `j` is conditionally unimportant. This is
/// the ordinary benchmark with unit noise; `j` is checked against the truth.
pub fn generate_null(n: usize, d: usize, j: usize, seed: u64) -> Result<(Array2<f64>, Array1<f64>)> {
    if TRUTH.contains(&j) {
        return Err(NnmrError::Input(format!("feature {j} enters the benchmark response")));
    }
    if j >= d {
        return Err(NnmrError::Input(format!("feature {j} out of range for {d} columns")));
    }
    generate_benchmark(&BenchmarkSpec {
        n,
        d,
        noise_sd: 1.0,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision is taken as 0 for an empty selection and F1 as 0 when both
/// precision and recall vanish.
pub fn selection_metrics(selected: &[usize], truth: &[usize]) -> Result<SelectionScore> {
    if truth.is_empty() {
        return Err(NnmrError::Input("truth set is empty".into()));
    }
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    let mut tru = truth.to_vec();
    tru.sort_unstable();
    tru.dedup();
    let hits = sel.iter().filter(|j| tru.binary_search(j).is_ok()).count() as f64;
    let precision = if sel.is_empty() { 0.0 } else { hits / sel.len() as f64 };
    let recall = hits / tru.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(SelectionScore { precision, recall, f1 })
}

/// Marginal screening baseline: the `k` columns with the largest absolute
/// Pearson correlation with `y`, ascending by index.
pub fn marginal_screening(x: ArrayView2<f64>, y: &Array1<f64>, k: usize) -> Vec<usize> {
    let n = y.len() as f64;
    let ym = y.sum() / n;
    let yc = y.mapv(|v| v - ym);
    let yn = yc.dot(&yc).sqrt();
    let mut scored: Vec<(usize, f64)> = x
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(j, col)| {
            let m = col.sum() / n;
            let c = col.mapv(|v| v - m);
            let denom = c.dot(&c).sqrt() * yn;
            let r = if denom > 0.0 { c.dot(&yc) / denom } else { 0.0 };
            (j, r.abs())
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut top: Vec<usize> = scored.into_iter().take(k).map(|(j, _)| j).collect();
    top.sort_unstable();
    top
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation; `sd` is 0 for fewer than two values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Selection,
    Type1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    /// `None` on success, otherwise the error that stopped the replicate.
    pub failure: Option<String>,
    pub selected: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<SelectionScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<SelectionScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuned: Option<GridPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_selection: Option<TestOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_selection: Option<TestOutcome>,
}

impl ReplicateRecord {
    fn failed(replicate: usize, seed: u64, err: &NnmrError) -> Self {
        Self {
            replicate,
            seed,
            failure: Some(err.to_string()),
            selected: vec![],
            score: None,
            baseline: None,
            tuned: None,
            post_selection: None,
            no_selection: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Compact per-replicate summary of one test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_perm: f64,
    pub p_gauss: f64,
    pub sigma_hat: f64,
    pub rejected: bool,
}

impl TestOutcome {
    fn from_result(r: &InferenceResult, level: f64) -> Self {
        Self {
            statistic: r.statistic,
            p_perm: r.p_perm,
            p_gauss: r.p_gauss,
            sigma_hat: r.sigma_hat,
            rejected: r.p_perm <= level,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
    pub baseline_precision: MeanSd,
    pub baseline_recall: MeanSd,
    pub baseline_f1: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionSummary {
    pub rejections: usize,
    pub trials: usize,
    pub rate: f64,
}

impl RejectionSummary {
    fn of<'a>(outcomes: impl Iterator<Item = &'a TestOutcome>) -> Self {
        let (mut rejections, mut trials) = (0, 0);
        for o in outcomes {
            trials += 1;
            rejections += o.rejected as usize;
        }
        let rate = if trials > 0 {
            rejections as f64 / trials as f64
        } else {
            f64::NAN
        };
        Self { rejections, trials, rate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Type1Summary {
    pub feature: usize,
    pub level: f64,
    pub permutations: usize,
    pub post_selection: RejectionSummary,
    pub no_selection: RejectionSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub study: Study,
    pub spec: BenchmarkSpec,
    pub truth: Vec<usize>,
    pub replicates: usize,
    pub failures: usize,
    pub records: Vec<ReplicateRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub type1: Option<Type1Summary>,
}

impl SimulationReport {
    /// Aggregates recomputed from the successful records.
    pub fn summarize_selection(records: &[ReplicateRecord]) -> Option<SelectionSummary> {
        let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.ok()).collect();
        let pick = |f: &dyn Fn(&ReplicateRecord) -> Option<f64>| -> Option<MeanSd> {
            MeanSd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
        };
        Some(SelectionSummary {
            precision: pick(&|r| r.score.map(|s| s.precision))?,
            recall: pick(&|r| r.score.map(|s| s.recall))?,
            f1: pick(&|r| r.score.map(|s| s.f1))?,
            baseline_precision: pick(&|r| r.baseline.map(|s| s.precision))?,
            baseline_recall: pick(&|r| r.baseline.map(|s| s.recall))?,
            baseline_f1: pick(&|r| r.baseline.map(|s| s.f1))?,
        })
    }
}

/// Seed of replicate `r` under `master`.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, r as u64)
}

fn selection_replicate(
    spec: &BenchmarkSpec,
    r: usize,
    net_config: &NetworkConfig,
    grid: &[GridPoint],
    base: &TrainConfig,
) -> ReplicateRecord {
    let seed = replicate_seed(spec.seed, r);
    let run = || -> Result<ReplicateRecord> {
        let (x, y) = generate_benchmark(&BenchmarkSpec { seed, ..spec.clone() })?;
        let base = TrainConfig {
            seed: derive_named(seed, "train"),
            ..base.clone()
        };
        let config = net_config.with_input_dim(spec.d);
        let tuned = if grid.len() == 1 {
            grid[0].apply(&base)
        } else {
            train::tune(x.view(), &y, &config, grid, &base)?
        };
        let model = train::prune(&train::fit(x.view(), &y, &config, &tuned)?);
        let truth = spec.truth();
        let baseline = marginal_screening(x.view(), &y, truth.len());
        Ok(ReplicateRecord {
            replicate: r,
            seed,
            failure: None,
            score: Some(selection_metrics(&model.selected, &truth)?),
            baseline: Some(selection_metrics(&baseline, &truth)?),
            selected: model.selected,
            tuned: Some(GridPoint {
                lambda1: tuned.lambda1,
                lambda2: tuned.lambda2,
                tau1: tuned.tau1,
            }),
            post_selection: None,
            no_selection: None,
        })
    };
    run().unwrap_or_else(|e| {
        log::warn!("replicate {r} failed: {e}");
        ReplicateRecord::failed(r, seed, &e)
    })
}

/// Repeats generate → tune → fit → prune → score. Failed replicates are kept
/// as records and left out of the aggregates.
pub fn run_selection_study(
    spec: &BenchmarkSpec,
    net_config: &NetworkConfig,
    grid: &[GridPoint],
    base: &TrainConfig,
    replicates: usize,
) -> Result<SimulationReport> {
    spec.validate()?;
    base.validate()?;
    if replicates == 0 {
        return Err(NnmrError::Config("at least one replicate is required".into()));
    }
    if grid.is_empty() {
        return Err(NnmrError::Input("tuning grid is empty".into()));
    }
    let records: Vec<ReplicateRecord> = (0..replicates)
        .into_par_iter()
        .map(|r| selection_replicate(spec, r, net_config, grid, base))
        .collect();
    let failures = records.iter().filter(|r| !r.ok()).count();
    Ok(SimulationReport {
        study: Study::Selection,
        spec: spec.clone(),
        truth: spec.truth(),
        replicates,
        failures,
        selection: SimulationReport::summarize_selection(&records),
        records,
        type1: None,
    })
}

pub const MIN_TYPE1_REPLICATES: usize = 50;

#[allow(clippy::too_many_arguments)]
fn type1_replicate(
    spec: &BenchmarkSpec,
    j: usize,
    r: usize,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    b: usize,
    level: f64,
) -> ReplicateRecord {
    let seed = replicate_seed(spec.seed, r);
    let run = || -> Result<ReplicateRecord> {
        let (x, y) = generate_null(spec.n, spec.d, j, seed)?;
        let sp = infer::split(x.view(), &y, 0.5, derive_named(seed, "split"))?;
        let tc = TrainConfig {
            seed: derive_named(seed, "train"),
            ..train_config.clone()
        };
        let config = net_config.with_input_dim(spec.d);
        let selection = train::fit(sp.d1_x.view(), &sp.d1_y, &config, &tc)?;
        let perm_seed = derive_named(seed, "permutations");
        let post = infer::test_feature(&sp, &selection.selected, j, net_config, &tc, b, perm_seed)?;
        let everything: Vec<usize> = (0..spec.d).collect();
        let none = infer::test_feature(&sp, &everything, j, net_config, &tc, b, perm_seed)?;
        Ok(ReplicateRecord {
            replicate: r,
            seed,
            failure: None,
            selected: selection.selected,
            score: None,
            baseline: None,
            tuned: None,
            post_selection: Some(TestOutcome::from_result(&post, level)),
            no_selection: Some(TestOutcome::from_result(&none, level)),
        })
    };
    run().unwrap_or_else(|e| {
        log::warn!("replicate {r} failed: {e}");
        ReplicateRecord::failed(r, seed, &e)
    })
}

/// Type I error of the permutation test for the null column `j` under two
/// conditioning sets: every other column ("no selection") and the columns
/// selected on `D1` ("post-selection"). A test rejects when `p_perm ≤ level`.
#[allow(clippy::too_many_arguments)]
pub fn run_type1_study(
    spec: &BenchmarkSpec,
    j: usize,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    b: usize,
    replicates: usize,
    level: f64,
) -> Result<SimulationReport> {
    spec.validate()?;
    train_config.validate()?;
    if replicates < MIN_TYPE1_REPLICATES {
        return Err(NnmrError::Config(format!(
            "a type I study needs at least {MIN_TYPE1_REPLICATES} replicates, got {replicates}"
        )));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(NnmrError::Config(format!("level must lie in (0, 1], got {level}")));
    }
    if b < infer::MIN_PERMUTATIONS {
        return Err(NnmrError::Config(format!(
            "at least {} permutations are required, got {b}",
            infer::MIN_PERMUTATIONS
        )));
    }
    if TRUTH.contains(&j) || j >= spec.d {
        return Err(NnmrError::Input(format!("feature {j} is not a null column of the benchmark")));
    }
    let records: Vec<ReplicateRecord> = (0..replicates)
        .into_par_iter()
        .map(|r| type1_replicate(spec, j, r, net_config, train_config, b, level))
        .collect();
    let failures = records.iter().filter(|r| !r.ok()).count();
    let ok = || records.iter().filter(|r| r.ok());
    let type1 = Type1Summary {
        feature: j,
        level,
        permutations: b,
        post_selection: RejectionSummary::of(ok().filter_map(|r| r.post_selection.as_ref())),
        no_selection: RejectionSummary::of(ok().filter_map(|r| r.no_selection.as_ref())),
    };
    Ok(SimulationReport {
        study: Study::Type1,
        spec: spec.clone(),
        truth: spec.truth(),
        replicates,
        failures,
        records,
        selection: None,
        type1: Some(type1),
    })
}
