//! Criterion suites shared by the focused tests and the acceptance runner.
//! Each returns a one-line summary on success and a description of the first
//! violation otherwise.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array1, Array2};
use nnmr::data::{self, Scaling};
use nnmr::infer;
use nnmr::net::{self, AffineLayer, NetworkConfig, NetworkParams};
use nnmr::rng::{derive_seed, rng_from_seed};
use nnmr::simgen::{self, BenchmarkSpec};
use nnmr::train::{self, FittedModel, TrainConfig};
use rand::Rng;

use super::*;

pub type Check = Result<String, String>;

// ---------------------------------------------------------------------------
// Gradients

const FD_STEP: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

/// Entries whose L1 term has a kink within the margin are excluded.
fn near_l1_kink(p: &NetworkParams, block: usize, i: usize) -> bool {
    if block == 0 {
        return p.gate[i].abs() < KINK_MARGIN;
    }
    let first_hidden = if p.input_layer.is_some() { 3 } else { 1 };
    let hidden_blocks = 2 * p.hidden_layers.len();
    if block >= first_hidden && block < first_hidden + hidden_blocks {
        let layer = &p.hidden_layers[(block - first_hidden) / 2];
        if (block - first_hidden) % 2 == 0 {
            let w = layer.weights.ncols();
            let (r, c) = (i / w, i % w);
            let anchor = if r == c { 1.0 } else { 0.0 };
            return (layer.weights[[r, c]] - anchor).abs() < KINK_MARGIN;
        }
        return layer.bias[i].abs() < KINK_MARGIN;
    }
    false
}

/// One random draw. `None` when a pre-activation sits within the margin of a
/// ReLU kink and the draw must be replaced; otherwise the number of
/// coordinates compared, or the first mismatch.
fn gradient_draw(seed: u64) -> Option<Result<(usize, f64), String>> {
    let mut rng = rng_from_seed(seed);
    let d = rng.random_range(1..=8);
    let depth = rng.random_range(0..=3);
    let width = rng.random_range(1..=8);
    let n = rng.random_range(1..=6);
    let config = NetworkConfig::new(d, depth, width).unwrap();
    let params = random_params(&config, &mut rng);
    let x = random_matrix(n, d, &mut rng);
    let y = random_matrix(n, 1, &mut rng).column(0).to_owned();
    let lambda1 = rng.random_range(0.0..0.5);
    let lambda2 = rng.random_range(0.0..0.5);

    for row in x.rows() {
        let (_, pre) = oracle_forward_traced(&params, &row.to_vec());
        if pre.iter().any(|z| z.abs() < KINK_MARGIN) {
            return None;
        }
    }
    let (_, grad) = net::objective_gradient(&params, &config, x.view(), &y, lambda1, lambda2).unwrap();
    let analytic: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.to_vec()).collect();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (block, values) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            if near_l1_kink(&params, block, i) {
                continue;
            }
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.blocks_mut()[block][i] += delta;
                oracle_objective(&p, &x, &y, lambda1, lambda2)
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let scale = a.abs().max(fd.abs()).max(GRAD_TOL);
            let err = (a - fd).abs() / scale;
            if err > GRAD_TOL {
                return Some(Err(format!(
                    "seed {seed} block {block} entry {i}: analytic {a} vs finite difference {fd}"
                )));
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    Some(Ok((checked, worst)))
}

pub fn gradient_suite(draws: usize) -> Check {
    let (mut done, mut seed, mut coords, mut worst) = (0, 0u64, 0, 0.0f64);
    while done < draws {
        if let Some(r) = gradient_draw(seed) {
            let (c, w) = r?;
            done += 1;
            coords += c;
            worst = worst.max(w);
        }
        seed += 1;
    }
    Ok(format!("{done} networks, {coords} coordinates, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// Truncation and pruning

/// Random parameters in which some gates are exactly zero and some square
/// layers are exactly the identity.
pub fn structured_params(config: &NetworkConfig, rng: &mut impl Rng) -> NetworkParams {
    let mut p = NetworkParams::zeros(config);
    for block in p.blocks_mut() {
        for v in block.iter_mut() {
            *v = 0.6 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    for a in p.gate.iter_mut() {
        if rng.random_bool(0.4) {
            *a = 0.0;
        }
    }
    for layer in p.hidden_layers.iter_mut() {
        if rng.random_bool(0.5) {
            *layer = AffineLayer::identity(config.width);
        } else {
            for ((r, c), w) in layer.weights.indexed_iter_mut() {
                if r == c {
                    *w += 1.0;
                }
            }
        }
    }
    p
}

fn wrap_model(params: NetworkParams, config: &NetworkConfig, x: &Array2<f64>) -> FittedModel {
    let d = config.input_dim;
    let y = Array1::zeros(x.nrows());
    FittedModel {
        selected: (0..d).filter(|&j| params.gate[j] != 0.0).collect(),
        pruned_depth: config.depth,
        params,
        config: config.clone(),
        train_history: vec![],
        final_objective: 0.0,
        features: (0..d).collect(),
        scaling: Scaling::fit(x.view(), &y),
    }
}

/// Pruned and unpruned networks agree exactly on random inputs.
pub fn prune_equality_case(seed: u64) -> Result<(), String> {
    let mut rng = rng_from_seed(seed);
    let config = NetworkConfig::new(rng.random_range(1..=8), rng.random_range(0..=4), rng.random_range(1..=8)).unwrap();
    let params = structured_params(&config, &mut rng);
    let x = random_matrix(100, config.input_dim, &mut rng);
    let model = wrap_model(params, &config, &x);
    let pruned = train::prune(&model);
    let full = net::batch_forward(&model.params, &model.config, x.view()).unwrap();
    let xs = data::select_columns(x.view(), &pruned.features);
    let small = net::batch_forward(&pruned.params, &pruned.config, xs.view()).unwrap();
    if full != small {
        return Err(format!("seed {seed}: pruned output differs"));
    }
    if pruned.params.hidden_layers.iter().any(|l| l.is_identity()) {
        return Err(format!("seed {seed}: an identity layer survived pruning"));
    }
    Ok(())
}

pub fn truncate_idempotence_case(seed: u64) -> Result<(), String> {
    let mut rng = rng_from_seed(seed);
    let config = NetworkConfig::new(rng.random_range(1..=8), rng.random_range(0..=3), rng.random_range(1..=6)).unwrap();
    let p = random_params(&config, &mut rng);
    let (t1, t2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..20.0));
    let once = train::truncate(&p, &config, t1, t2).unwrap();
    let twice = train::truncate(&once, &config, t1, t2).unwrap();
    if once != twice {
        return Err(format!("seed {seed}: truncate is not idempotent"));
    }
    Ok(())
}

pub fn tau1_monotonicity_case(seed: u64) -> Result<(), String> {
    let mut rng = rng_from_seed(seed);
    let config = NetworkConfig::new(rng.random_range(1..=12), 1, 3).unwrap();
    let p = random_params(&config, &mut rng);
    let mut taus: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.5)).collect();
    taus.sort_by(f64::total_cmp);
    let counts: Vec<usize> = taus
        .iter()
        .map(|&t| train::truncate(&p, &config, t, 0.0).unwrap().gate.iter().filter(|a| **a != 0.0).count())
        .collect();
    if counts.windows(2).any(|w| w[1] > w[0]) {
        return Err(format!("seed {seed}: gate counts {counts:?} grow with tau1 {taus:?}"));
    }
    Ok(())
}

/// Short fits on random data; afterwards every gate is zero or above `τ₁`
/// and every square layer is the identity or farther than `τ₂` from it.
pub fn dichotomy_case(seed: u64) -> Result<(), String> {
    let mut rng = rng_from_seed(seed);
    let d = rng.random_range(2..=6);
    let config = NetworkConfig::new(d, rng.random_range(0..=3), rng.random_range(2..=6)).unwrap();
    let x = random_matrix(40, d, &mut rng);
    let y = x.column(0).mapv(|v| 2.0 * v) + random_matrix(40, 1, &mut rng).column(0);
    let tc = TrainConfig {
        lambda1: rng.random_range(0.0..0.3),
        tau1: rng.random_range(0.0..0.5),
        tau2: rng.random_range(0.0..2.0),
        trunc_period: rng.random_range(1..=50),
        max_iters: 200,
        penalty_warmup: 0,
        seed,
        ..TrainConfig::default()
    };
    let m = train::fit(x.view(), &y, &config, &tc).map_err(|e| e.to_string())?;
    if let Some(a) = m.params.gate.iter().find(|a| **a != 0.0 && a.abs() <= tc.tau1) {
        return Err(format!("seed {seed}: gate {a} lies in (0, {}]", tc.tau1));
    }
    for l in &m.params.hidden_layers {
        if !l.is_identity() && l.distance_from_identity() <= tc.tau2 {
            return Err(format!("seed {seed}: layer at distance {} kept", l.distance_from_identity()));
        }
    }
    Ok(())
}

pub fn truncation_suite(cases: u64) -> Check {
    for s in 0..cases {
        dichotomy_case(s)?;
        truncate_idempotence_case(s)?;
        prune_equality_case(s)?;
        tau1_monotonicity_case(s)?;
    }
    Ok(format!("{cases} cases each of dichotomy, idempotence, prune equality, tau1 monotonicity"))
}

// ---------------------------------------------------------------------------
// Permutation test

pub fn calibration_suite(trials: usize, m: usize, b: usize) -> Check {
    let mut p = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = rng_from_seed(derive_seed(77, t as u64));
        let u: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
        let v: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
        let r = infer::permutation_test(&u, &v, b, derive_seed(78, t as u64), 0).map_err(|e| e.to_string())?;
        p.push(r.p_perm);
    }
    let d = ks_uniform_statistic(&p);
    let pv = ks_p_value(d, p.len());
    if pv <= 0.01 {
        return Err(format!("KS D = {d:.4}, p = {pv:.4} over {trials} trials"));
    }
    let mut rng = rng_from_seed(79);
    for k in 0..1000 {
        let len = rng.random_range(1..=60);
        let u: Vec<f64> = (0..len).map(|_| 3.0 * normal(&mut rng)).collect();
        let v: Vec<f64> = (0..len).map(|_| normal(&mut rng)).collect();
        let a = infer::ts_statistic(&u, &v).unwrap();
        let b = infer::ts_statistic(&v, &u).unwrap();
        if a != -b {
            return Err(format!("pair {k}: T(U,V) = {a} but T(V,U) = {b}"));
        }
    }
    Ok(format!("KS D = {d:.4}, p = {pv:.3}; antisymmetry exact on 1000 pairs"))
}

// ---------------------------------------------------------------------------
// Oracles

pub fn oracle_suite(instances: u64) -> Check {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut rng = rng_from_seed(derive_seed(500, s));
        let config = NetworkConfig::new(rng.random_range(1..=6), rng.random_range(0..=3), rng.random_range(1..=6)).unwrap();
        let p = random_params(&config, &mut rng);
        let n = rng.random_range(1..=8);
        let x = random_matrix(n, config.input_dim, &mut rng);
        let y = random_matrix(n, 1, &mut rng).column(0).to_owned();
        let batch = net::batch_forward(&p, &config, x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let want = oracle_forward(&p, &row);
            let single = net::forward(&p, &config, &row).unwrap();
            for got in [single, batch[i]] {
                let e = rel_err(got, want);
                if e > 1e-12 {
                    return Err(format!("instance {s}: forward {got} vs oracle {want}"));
                }
                worst = worst.max(e);
            }
        }
        let (l1, l2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let got = net::objective(&p, &config, x.view(), &y, l1, l2).unwrap();
        let want = oracle_objective(&p, &x, &y, l1, l2);
        let e = rel_err(got, want);
        if e > 1e-12 {
            return Err(format!("instance {s}: objective {got} vs oracle {want}"));
        }
        worst = worst.max(e);
        let m = rng.random_range(1..=40);
        let u: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
        let v: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
        let got = infer::ts_statistic(&u, &v).unwrap();
        let want = oracle_ts(&u, &v);
        // Relative to the summed magnitudes, so near-cancelling draws are
        // judged on rounding rather than on a tiny denominator.
        let mass = u.iter().zip(&v).map(|(a, b)| (a * a - b * b).abs()).sum::<f64>() / m as f64;
        let e = (got - want).abs() / mass.max(want.abs());
        if e > 1e-12 {
            return Err(format!("instance {s}: statistic {got} vs oracle {want}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("{instances} instances each; worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Studies

pub fn selection_study(n: usize, d: usize, replicates: usize) -> Result<(f64, f64, f64), String> {
    let spec = BenchmarkSpec { n, d, noise_sd: 1.0, seed: 2024 };
    let config = NetworkConfig::new(d, nnmr::cli::DEFAULT_DEPTH, nnmr::cli::DEFAULT_WIDTH).unwrap();
    let report = simgen::run_selection_study(&spec, &config, &train::default_grid(), &TrainConfig::default(), replicates)
        .map_err(|e| e.to_string())?;
    let s = report.selection.ok_or("every replicate failed")?;
    Ok((s.precision.mean, s.recall.mean, s.f1.mean))
}

pub fn type1_study(replicates: usize, b: usize) -> Result<(f64, f64, usize), String> {
    let spec = BenchmarkSpec { n: 1000, d: 200, noise_sd: 1.0, seed: 2025 };
    let config = NetworkConfig::new(200, nnmr::cli::DEFAULT_DEPTH, nnmr::cli::DEFAULT_WIDTH).unwrap();
    let report = simgen::run_type1_study(&spec, 1, &config, &TrainConfig::default(), b, replicates, 0.05)
        .map_err(|e| e.to_string())?;
    let t = report.type1.unwrap();
    Ok((t.post_selection.rate, t.no_selection.rate, report.failures))
}

// ---------------------------------------------------------------------------
// Command line

pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_nnmr"))
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(binary()).args(args).output().expect("binary runs")
}

/// CSV with `d` standard normal features `x0..` and `y = 2·x0 + ε`.
pub fn write_linear_csv(path: &Path, n: usize, d: usize, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let mut text = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",") + ",y\n";
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let y = 2.0 * row[0] + 0.5 * normal(&mut rng);
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(y.to_string());
        text += &(fields.join(",") + "\n");
    }
    std::fs::write(path, text).unwrap();
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Runs `args` (plus `--out DIR --threads T`) at thread counts 1, 4 and 1
/// again and requires identical output files.
fn same_bytes(label: &str, args: &[&str], root: &Path) -> Result<(), String> {
    let mut seen: Option<Vec<(String, Vec<u8>)>> = None;
    for (k, threads) in ["1", "4", "1"].iter().enumerate() {
        let dir = root.join(format!("{label}-{k}"));
        let dir_s = dir.to_string_lossy().into_owned();
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--out", &dir_s, "--threads", threads]);
        let out = run_cli(&full);
        if !out.status.success() {
            return Err(format!("{label}: exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        let files = outputs(&dir);
        if files.is_empty() {
            return Err(format!("{label}: no output written"));
        }
        match &seen {
            None => seen = Some(files),
            Some(prev) if *prev != files => return Err(format!("{label}: outputs differ at --threads {threads}")),
            _ => {}
        }
    }
    Ok(())
}

pub fn determinism_suite() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let csv = root.path().join("data.csv");
    write_linear_csv(&csv, 150, 5, 3);
    let csv_s = csv.to_string_lossy().into_owned();
    let model_dir = root.path().join("fit-0");
    let model = model_dir.join("model.json").to_string_lossy().into_owned();
    let fit = ["fit", "--input", &csv_s, "--target", "y", "--seed", "11", "--max-iters", "300", "--split-ratio", "0.5", "--tune"];
    same_bytes("fit", &fit, root.path())?;
    let test = ["test", "--input", &csv_s, "--model", &model, "--feature", "x0", "--feature", "x3", "--B", "200", "--seed", "11", "--max-iters", "200"];
    same_bytes("test", &test, root.path())?;
    let sel = ["simulate", "--study", "selection", "--n", "120", "--d", "10", "--replicates", "3", "--max-iters", "200", "--seed", "5"];
    same_bytes("selection", &sel, root.path())?;
    let t1 = ["simulate", "--study", "type1", "--n", "80", "--d", "10", "--replicates", "50", "--B", "100", "--max-iters", "40", "--width", "4", "--seed", "5"];
    same_bytes("type1", &t1, root.path())?;
    Ok("fit, test, simulate (selection and type1) byte-identical at --threads 1 and 4".into())
}
