//! Command-line front end: CSV ingestion, configuration resolution, and the
//! `fit`, `test` and `simulate` commands. Every command writes JSON documents
//! that embed a [`RunManifest`].

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Scaling;
use crate::error::{NnmrError, Result};
use crate::infer::{self, DEFAULT_PERMUTATIONS};
use crate::net::NetworkConfig;
use crate::rng::derive_named;
use crate::simgen::{self, BenchmarkSpec, SimulationReport};
use crate::train::{self, BatchSize, FittedModel, GridPoint, TrainConfig};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_WIDTH: usize = 16;

#[derive(Parser, Debug)]
#[command(name = "nnmr", version, about = "Sparse variable selection and inference with input-gated ReLU networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a gated network and report the selected features
    Fit(FitArgs),
    /// Permutation tests for feature importance on a held-out split
    Test(TestArgs),
    /// Run a simulation study on the synthetic benchmark
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct SharedArgs {
    /// Input CSV with a header row
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Response column
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated feature columns (default: every other numeric column)
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// File of `key = value` lines; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Field delimiter, a single byte
    #[arg(long)]
    pub delimiter: Option<char>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
    /// Hidden layers
    #[arg(long)]
    pub depth: Option<usize>,
    /// Hidden width
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Choose (lambda1, lambda2, tau1) on a validation split
    #[arg(long)]
    pub tune: bool,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fit on the first part of a random split only, so `test --model` can
    /// use the remainder
    #[arg(long)]
    pub split_ratio: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct TestArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub model_args: ModelArgs,
    /// Model file from `fit`; without it the selection is fit on D1 here
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Feature to test; repeatable (default: every selected feature)
    #[arg(long = "feature")]
    pub feature: Vec<String>,
    /// Permutations
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// Fraction of rows in D1
    #[arg(long)]
    pub split_ratio: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyName {
    Selection,
    Type1,
}

impl FromStr for StudyName {
    type Err = NnmrError;
    fn from_str(s: &str) -> Result<Self> {
        <Self as ValueEnum>::from_str(s, true).map_err(|_| NnmrError::Config(format!("unknown study '{s}'")))
    }
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub study: Option<StudyName>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// Rejection level for the type I study
    #[arg(long)]
    pub level: Option<f64>,
    /// Null column tested in the type I study
    #[arg(long)]
    pub null_feature: Option<usize>,
}

/// Provenance embedded in every output document. It holds no timestamps,
/// paths or thread counts, so identical runs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub input_sha256: Option<String>,
    pub config: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str, seed: u64, input_sha256: Option<String>, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            input_sha256,
            config: serde_json::to_value(config)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// `key = value` settings; `#` starts a comment. Keys use underscores, and
/// dashes are accepted as synonyms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "b",
    "d",
    "delimiter",
    "depth",
    "features",
    "feature",
    "lambda1",
    "lambda2",
    "level",
    "lr",
    "max_iters",
    "n",
    "noise_sd",
    "null_feature",
    "replicates",
    "seed",
    "split_ratio",
    "study",
    "target",
    "tau1",
    "tau2",
    "trunc_period",
    "tune",
    "val_fraction",
    "width",
];

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NnmrError::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = key.trim().to_ascii_lowercase().replace('-', "_");
            let key = if key == "learning_rate" { "lr".to_string() } else { key };
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(NnmrError::Config(format!("config line {}: unknown key '{key}'", i + 1)));
            }
            entries.insert(key, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(&fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| NnmrError::Config(format!("config key '{key}': cannot parse '{v}'")))
            })
            .transpose()
    }

    /// Flag value, else file value, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn list(&self, flag: Option<Vec<String>>, key: &str) -> Option<Vec<String>> {
        flag.or_else(|| {
            self.entries
                .get(key)
                .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub tune: bool,
    pub grid: Vec<GridPoint>,
}

fn resolve_model(args: &ModelArgs, file: &ConfigFile, seed: u64, input_dim: usize) -> Result<ModelSettings> {
    let base = TrainConfig::default();
    let batch_size = match file.entries.get("batch_size").map(|s| s.as_str()) {
        None => base.batch_size,
        Some("full") => BatchSize::Full,
        Some(_) => BatchSize::Rows(file.get("batch_size")?.unwrap_or(0)),
    };
    let train = TrainConfig {
        lambda1: file.resolve(args.lambda1, "lambda1", base.lambda1)?,
        lambda2: file.resolve(args.lambda2, "lambda2", base.lambda2)?,
        tau1: file.resolve(args.tau1, "tau1", base.tau1)?,
        tau2: file.resolve(args.tau2, "tau2", base.tau2)?,
        trunc_period: file.resolve(None, "trunc_period", base.trunc_period)?,
        max_iters: file.resolve(args.max_iters, "max_iters", base.max_iters)?,
        learning_rate: file.resolve(args.lr, "lr", base.learning_rate)?,
        batch_size,
        val_fraction: file.resolve(None, "val_fraction", base.val_fraction)?,
        seed,
        ..base
    };
    train.validate()?;
    let depth = file.resolve(args.depth, "depth", DEFAULT_DEPTH)?;
    let width = file.resolve(args.width, "width", DEFAULT_WIDTH)?;
    let network = NetworkConfig::new(input_dim.max(1), depth, width)?;
    let tune = args.tune || file.get::<bool>("tune")?.unwrap_or(false);
    let grid = if tune {
        train::default_grid()
    } else {
        vec![GridPoint {
            lambda1: train.lambda1,
            lambda2: train.lambda2,
            tau1: train.tau1,
        }]
    };
    Ok(ModelSettings {
        network,
        train,
        tune,
        grid,
    })
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub target: String,
    pub feature_names: Vec<String>,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub sha256: String,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL")
}

enum Cell {
    Missing,
    Value(f64),
    Text,
}

fn parse_cell(field: &str) -> Cell {
    if is_missing(field) {
        return Cell::Missing;
    }
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Cell::Value(v),
        _ => Cell::Text,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a CSV. Rows with a missing value in any used column are dropped
/// and counted. A column with no numeric cell at all is left out of the
/// default feature set; any other non-numeric cell in a used column is an
/// error naming its row and column.
pub fn load_dataset(path: &Path, target: &str, features: Option<&[String]>, extra: &[String], delimiter: u8) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let sha256 = sha256_hex(&bytes);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let position = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| NnmrError::Input(format!("column '{name}' not found in header")))
    };
    let target_col = position(target)?;
    let has_numeric = |c: usize| rows.iter().any(|r| matches!(parse_cell(r.get(c).unwrap_or("")), Cell::Value(_)));
    let mut feature_cols: Vec<usize> = match features {
        Some(names) => names.iter().map(|n| position(n)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&c| c != target_col)
            .filter(|&c| {
                let keep = has_numeric(c) || rows.is_empty();
                if !keep {
                    log::warn!("column '{}' has no numeric values and is not used", header[c]);
                }
                keep
            })
            .collect(),
    };
    for name in extra {
        let c = position(name)?;
        if !feature_cols.contains(&c) {
            feature_cols.push(c);
        }
    }
    if feature_cols.contains(&target_col) {
        return Err(NnmrError::Input(format!("target '{target}' is also listed as a feature")));
    }
    let mut seen = feature_cols.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != feature_cols.len() {
        return Err(NnmrError::Input("a feature column is listed twice".into()));
    }
    if feature_cols.is_empty() {
        return Err(NnmrError::Input("no feature columns".into()));
    }

    let used: Vec<usize> = std::iter::once(target_col).chain(feature_cols.iter().copied()).collect();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    let mut dropped = 0;
    for (i, record) in rows.iter().enumerate() {
        if record.len() != header.len() {
            return Err(NnmrError::Input(format!(
                "row {} has {} fields, header has {}",
                i + 1,
                record.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(used.len());
        let mut missing = false;
        for &c in &used {
            match parse_cell(&record[c]) {
                Cell::Missing => missing = true,
                Cell::Value(v) => row.push(v),
                Cell::Text => {
                    return Err(NnmrError::Input(format!(
                        "row {}, column '{}': '{}' is not a finite number",
                        i + 1,
                        header[c],
                        &record[c]
                    )))
                }
            }
        }
        if missing {
            dropped += 1;
        } else {
            values.push(row);
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with missing values");
    }
    let n = values.len();
    let p = feature_cols.len();
    let y = Array1::from_iter(values.iter().map(|r| r[0]));
    let x = Array2::from_shape_fn((n, p), |(i, j)| values[i][j + 1]);
    Ok(Dataset {
        target: target.to_string(),
        feature_names: feature_cols.iter().map(|&c| header[c].clone()).collect(),
        x,
        y,
        rows_read: rows.len(),
        rows_dropped: dropped,
        sha256,
    })
}

fn delimiter_byte(c: char) -> Result<u8> {
    if c.is_ascii() {
        Ok(c as u8)
    } else {
        Err(NnmrError::Config(format!("delimiter must be a single ASCII character, got '{c}'")))
    }
}

// ---------------------------------------------------------------------------
// Output

/// Writes `value` as pretty JSON via a temporary file in the same directory.
pub fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| NnmrError::Io(e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub ratio: f64,
    pub seed: u64,
}

/// Versioned model document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub manifest: RunManifest,
    pub target: String,
    pub feature_names: Vec<String>,
    pub split: Option<SplitInfo>,
    pub model: FittedModel,
}

impl ModelDocument {
    pub fn selected_names(&self) -> Vec<String> {
        self.model.selected.iter().map(|&j| self.feature_names[j].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGate {
    pub name: String,
    pub index: usize,
    pub gate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_sd: Vec<f64>,
    pub target_mean: f64,
    pub target_sd: f64,
}

impl Standardization {
    fn from_scaling(s: &Scaling) -> Self {
        Self {
            feature_mean: s.x_mean.to_vec(),
            feature_sd: s.x_sd.to_vec(),
            target_mean: s.y_mean,
            target_sd: s.y_sd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub manifest: RunManifest,
    pub target: String,
    pub rows_used: usize,
    pub rows_dropped: usize,
    pub selected: Vec<FeatureGate>,
    pub gates: Vec<FeatureGate>,
    pub pruned_depth: usize,
    pub final_objective: f64,
    pub chosen: GridPoint,
    pub standardization: Standardization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub feature: String,
    pub index: usize,
    pub in_selection: bool,
    pub statistic: f64,
    pub p_perm: f64,
    pub p_gauss: f64,
    pub sigma_hat: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub manifest: RunManifest,
    pub target: String,
    pub split: SplitInfo,
    pub d1_rows: usize,
    pub d2_rows: usize,
    pub selected: Vec<String>,
    pub results: Vec<FeatureTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationDocument {
    pub manifest: RunManifest,
    pub report: SimulationReport,
}

// ---------------------------------------------------------------------------
// Commands

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| NnmrError::Config(format!("{what} is required")))
}

struct Common {
    file: ConfigFile,
    seed: u64,
    delimiter: u8,
}

fn common(shared: &SharedArgs) -> Result<Common> {
    let file = ConfigFile::load(shared.config.as_deref())?;
    let seed = file.resolve(shared.seed, "seed", 0)?;
    let delimiter = delimiter_byte(file.resolve(shared.delimiter, "delimiter", ',')?)?;
    Ok(Common { file, seed, delimiter })
}

fn fit_selection(x: &Array2<f64>, y: &Array1<f64>, settings: &ModelSettings) -> Result<(FittedModel, GridPoint)> {
    let network = settings.network.with_input_dim(x.ncols());
    let chosen = if settings.grid.len() == 1 {
        settings.grid[0].apply(&settings.train)
    } else {
        train::tune(x.view(), y, &network, &settings.grid, &settings.train)?
    };
    let model = train::fit(x.view(), y, &network, &chosen)?;
    let point = GridPoint {
        lambda1: chosen.lambda1,
        lambda2: chosen.lambda2,
        tau1: chosen.tau1,
    };
    Ok((model, point))
}

#[derive(Serialize)]
struct FitResolved<'a> {
    target: &'a str,
    features: &'a [String],
    delimiter: char,
    split_ratio: Option<f64>,
    settings: &'a ModelSettings,
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let c = common(&args.shared)?;
    let input = require(args.shared.input.clone(), "--input")?;
    let target: String = require(c.file.resolve_opt(args.shared.target.clone(), "target")?, "--target")?;
    let features = c.file.list(args.shared.features.clone(), "features");
    let data = load_dataset(&input, &target, features.as_deref(), &[], c.delimiter)?;
    let settings = resolve_model(&args.model, &c.file, c.seed, data.x.ncols())?;
    let split_ratio = c.file.resolve_opt(args.split_ratio, "split_ratio")?;

    let (x, y, split) = match split_ratio {
        Some(ratio) => {
            let seed = derive_named(c.seed, "split");
            let sp = infer::split(data.x.view(), &data.y, ratio, seed)?;
            (sp.d1_x, sp.d1_y, Some(SplitInfo { ratio, seed }))
        }
        None => (data.x.clone(), data.y.clone(), None),
    };
    let (model, chosen) = fit_selection(&x, &y, &settings)?;

    let resolved = FitResolved {
        target: &target,
        features: &data.feature_names,
        delimiter: c.delimiter as char,
        split_ratio,
        settings: &settings,
    };
    let manifest = RunManifest::new("fit", c.seed, Some(data.sha256.clone()), &resolved)?;
    let gates: Vec<FeatureGate> = model
        .features
        .iter()
        .zip(model.params.gate.iter())
        .map(|(&j, &a)| FeatureGate {
            name: data.feature_names[j].clone(),
            index: j,
            gate: a,
        })
        .collect();
    let pruned = train::prune(&model);
    let report = FitReport {
        manifest: manifest.clone(),
        target: target.clone(),
        rows_used: x.nrows(),
        rows_dropped: data.rows_dropped,
        selected: gates.iter().filter(|g| g.gate != 0.0).cloned().collect(),
        gates,
        pruned_depth: pruned.pruned_depth,
        final_objective: pruned.final_objective,
        chosen,
        standardization: Standardization::from_scaling(&model.scaling),
    };
    let doc = ModelDocument {
        format_version: MODEL_FORMAT_VERSION,
        manifest,
        target,
        feature_names: data.feature_names.clone(),
        split,
        model: pruned,
    };
    write_json_atomic(&args.shared.out.join("model.json"), &doc)?;
    write_json_atomic(&args.shared.out.join("report.json"), &report)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelDocument> {
    let doc: ModelDocument = serde_json::from_str(&fs::read_to_string(path)?)?;
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(NnmrError::Input(format!(
            "model format version {} is not supported",
            doc.format_version
        )));
    }
    Ok(doc)
}

#[derive(Serialize)]
struct TestResolved<'a> {
    target: &'a str,
    features: &'a [String],
    delimiter: char,
    model_sha256: Option<String>,
    tested: &'a [String],
    permutations: usize,
    split: &'a SplitInfo,
    settings: &'a ModelSettings,
}

pub fn cmd_test(args: &TestArgs) -> Result<()> {
    let c = common(&args.shared)?;
    let input = require(args.shared.input.clone(), "--input")?;
    let model_doc = match &args.model {
        Some(p) => Some((load_model(p)?, sha256_hex(&fs::read(p)?))),
        None => None,
    };
    let target: String = match c.file.resolve_opt(args.shared.target.clone(), "target")? {
        Some(t) => t,
        None => require(model_doc.as_ref().map(|(m, _)| m.target.clone()), "--target")?,
    };
    let requested: Vec<String> = if args.feature.is_empty() {
        c.file.list(None, "feature").unwrap_or_default()
    } else {
        args.feature.clone()
    };
    let features = c
        .file
        .list(args.shared.features.clone(), "features")
        .or_else(|| model_doc.as_ref().map(|(m, _)| m.feature_names.clone()));
    let data = load_dataset(&input, &target, features.as_deref(), &requested, c.delimiter)?;
    let settings = resolve_model(&args.model_args, &c.file, c.seed, data.x.ncols())?;
    let b = c.file.resolve(args.b, "b", DEFAULT_PERMUTATIONS)?;
    let flag_ratio = c.file.resolve_opt(args.split_ratio, "split_ratio")?;

    let split_info = match model_doc.as_ref().and_then(|(m, _)| m.split.clone()) {
        Some(s) => {
            if flag_ratio.is_some_and(|r| r != s.ratio) {
                return Err(NnmrError::Config(format!(
                    "--split-ratio conflicts with the model's split ratio {}",
                    s.ratio
                )));
            }
            s
        }
        None => SplitInfo {
            ratio: flag_ratio.unwrap_or(0.5),
            seed: derive_named(c.seed, "split"),
        },
    };
    let split = infer::split(data.x.view(), &data.y, split_info.ratio, split_info.seed)?;

    let selected: Vec<usize> = match &model_doc {
        Some((m, _)) => {
            if m.split.is_none() {
                log::warn!("the model was fit on all rows, so D2 is not independent of the selection");
            }
            m.selected_names()
                .iter()
                .map(|name| {
                    data.feature_names
                        .iter()
                        .position(|f| f == name)
                        .ok_or_else(|| NnmrError::Input(format!("selected feature '{name}' is missing from the data")))
                })
                .collect::<Result<_>>()?
        }
        None => fit_selection(&split.d1_x, &split.d1_y, &settings)?.0.selected,
    };
    let tested: Vec<usize> = if requested.is_empty() {
        selected.clone()
    } else {
        requested
            .iter()
            .map(|name| data.feature_names.iter().position(|f| f == name).expect("requested columns are loaded"))
            .collect()
    };
    if tested.is_empty() {
        return Err(NnmrError::Input("no features to test: the selection is empty and no --feature was given".into()));
    }

    let refit = TrainConfig {
        seed: derive_named(c.seed, "refit"),
        ..settings.train.clone()
    };
    let perm_seed = derive_named(c.seed, "permutations");
    let results: Vec<FeatureTest> = tested
        .par_iter()
        .map(|&j| {
            let r = infer::test_feature(&split, &selected, j, &settings.network, &refit, b, perm_seed)?;
            Ok(FeatureTest {
                feature: data.feature_names[j].clone(),
                index: j,
                in_selection: selected.contains(&j),
                statistic: r.statistic,
                p_perm: r.p_perm,
                p_gauss: r.p_gauss,
                sigma_hat: r.sigma_hat,
                b: r.b,
                degenerate: r.degenerate,
            })
        })
        .collect::<Result<_>>()?;

    let tested_names: Vec<String> = tested.iter().map(|&j| data.feature_names[j].clone()).collect();
    let resolved = TestResolved {
        target: &target,
        features: &data.feature_names,
        delimiter: c.delimiter as char,
        model_sha256: model_doc.as_ref().map(|(_, h)| h.clone()),
        tested: &tested_names,
        permutations: b,
        split: &split_info,
        settings: &settings,
    };
    let report = InferenceReport {
        manifest: RunManifest::new("test", c.seed, Some(data.sha256.clone()), &resolved)?,
        target,
        split: split_info,
        d1_rows: split.d1_rows.len(),
        d2_rows: split.d2_rows.len(),
        selected: selected.iter().map(|&j| data.feature_names[j].clone()).collect(),
        results,
    };
    write_json_atomic(&args.shared.out.join("inference.json"), &report)
}

#[derive(Serialize)]
struct SimulateResolved<'a> {
    study: StudyName,
    spec: &'a BenchmarkSpec,
    replicates: usize,
    permutations: Option<usize>,
    level: Option<f64>,
    null_feature: Option<usize>,
    settings: &'a ModelSettings,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let c = common(&args.shared)?;
    let study = require(c.file.resolve_opt(args.study, "study")?, "--study")?;
    let spec = BenchmarkSpec {
        n: c.file.resolve(args.n, "n", 1000)?,
        d: c.file.resolve(args.d, "d", 200)?,
        noise_sd: c.file.resolve(args.noise_sd, "noise_sd", 1.0)?,
        seed: c.seed,
    };
    let settings = resolve_model(&args.model, &c.file, c.seed, spec.d)?;
    let (report, resolved_replicates, b, level, j) = match study {
        StudyName::Selection => {
            let r = c.file.resolve(args.replicates, "replicates", 20)?;
            let report = simgen::run_selection_study(&spec, &settings.network, &settings.grid, &settings.train, r)?;
            (report, r, None, None, None)
        }
        StudyName::Type1 => {
            let r = c.file.resolve(args.replicates, "replicates", 100)?;
            let b = c.file.resolve(args.b, "b", DEFAULT_PERMUTATIONS)?;
            let level = c.file.resolve(args.level, "level", 0.05)?;
            let j = c.file.resolve(args.null_feature, "null_feature", 1)?;
            let tc = settings.grid[0].apply(&settings.train);
            let report = simgen::run_type1_study(&spec, j, &settings.network, &tc, b, r, level)?;
            (report, r, Some(b), Some(level), Some(j))
        }
    };
    let resolved = SimulateResolved {
        study,
        spec: &spec,
        replicates: resolved_replicates,
        permutations: b,
        level,
        null_feature: j,
        settings: &settings,
    };
    let csv = replicate_rows(&report)?;
    let doc = SimulationDocument {
        manifest: RunManifest::new("simulate", c.seed, None, &resolved)?,
        report,
    };
    write_json_atomic(&args.shared.out.join("report.json"), &doc)?;
    write_atomic(&args.shared.out.join("replicates.csv"), &csv)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat per-replicate table for plotting.
pub fn replicate_rows(report: &SimulationReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "replicate",
        "seed",
        "failed",
        "n_selected",
        "selected",
        "precision",
        "recall",
        "f1",
        "baseline_f1",
        "post_p_perm",
        "post_rejected",
        "none_p_perm",
        "none_rejected",
    ])?;
    for r in &report.records {
        let selected = r.selected.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(" ");
        w.write_record([
            r.replicate.to_string(),
            r.seed.to_string(),
            (!r.ok()).to_string(),
            r.selected.len().to_string(),
            selected,
            fmt_opt(r.score.map(|s| s.precision)),
            fmt_opt(r.score.map(|s| s.recall)),
            fmt_opt(r.score.map(|s| s.f1)),
            fmt_opt(r.baseline.map(|s| s.f1)),
            fmt_opt(r.post_selection.map(|t| t.p_perm)),
            r.post_selection.map(|t| t.rejected.to_string()).unwrap_or_default(),
            fmt_opt(r.no_selection.map(|t| t.p_perm)),
            r.no_selection.map(|t| t.rejected.to_string()).unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| NnmrError::Io(e.into_error()))
}

fn configure_threads(shared: &SharedArgs) -> Result<()> {
    if let Some(t) = shared.threads {
        if t == 0 {
            return Err(NnmrError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| NnmrError::Config(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => {
            configure_threads(&a.shared)?;
            cmd_fit(a)
        }
        Command::Test(a) => {
            configure_threads(&a.shared)?;
            cmd_test(a)
        }
        Command::Simulate(a) => {
            configure_threads(&a.shared)?;
            cmd_simulate(a)
        }
    }
}
