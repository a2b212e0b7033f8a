//! Noise robustness, ablation and hyperparameter sweep protocols.
//!
//! Every protocol expands into independent cells of `(method, setting, seed)`.
//! Cells run on a bounded thread pool; a failed cell is recorded with its
//! error and the remaining cells still run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricSet};
use super::report::{payload_of, write_json, WeightSummary, REPORT_FILE, REPORT_SCHEMA_VERSION};
use crate::datasets::{inject_noise, DatasetBundle};
use crate::error::{Error, Result};
use crate::grid_graph::GraphOperator;
use crate::model::ModelConfig;
use crate::pipeline::{run_pgasr, train_pn_only, RunOutcome, TrainConfig, TrainContext};
use crate::seeding::derive_seed;

pub const NOISE_LEVELS: [f64; 3] = [0.1, 0.3, 0.5];
pub const WEIGHT_GRID: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];
pub const FOLD_GRID: [f64; 4] = [2.0, 3.0, 4.0, 5.0];
pub const DEFAULT_SEEDS: [u64; 4] = [0, 1, 2, 3];

const TAG_NOISE: u64 = 100;

/// Training arms compared by the protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pgasr,
    /// P-GASR with `α = 0`.
    WithoutMu,
    /// P-GASR with `β = 0`.
    WithoutPc,
    /// Unweighted single-phase training.
    Pn,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::Pgasr => "P-GASR",
            Self::WithoutMu => "w/o MU",
            Self::WithoutPc => "w/o PC",
            Self::Pn => "PN",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Noise,
    Ablation,
    Sweep,
}

impl ExperimentKind {
    pub fn csv_file(self) -> &'static str {
        match self {
            Self::Noise => "fig3_noise.csv",
            Self::Ablation => "fig4_ablation.csv",
            Self::Sweep => "fig5_sweep.csv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Beta,
    Folds,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [Self::Alpha, Self::Beta, Self::Folds];

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Alpha | Self::Beta => WEIGHT_GRID.to_vec(),
            Self::Folds => FOLD_GRID.to_vec(),
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) -> Result<()> {
        match self {
            Self::Alpha => cfg.alpha = value,
            Self::Beta => cfg.beta = value,
            Self::Folds => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(Error::config(format!(
                        "fold count {value} must be an integer of at least 2"
                    )));
                }
                cfg.folds = value as usize;
            }
        }
        Ok(())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Folds => "folds",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "folds" | "d" => Ok(Self::Folds),
            other => Err(Error::config(format!(
                "unknown sweep axis {other:?}; use alpha, beta or folds"
            ))),
        }
    }
}

/// Model, training and scheduling options shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mape_threshold: f64,
    /// Concurrent cells; 0 uses one per available core.
    pub jobs: usize,
}

/// Outcome of one `(method, setting, seed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub noise_level: Option<f64>,
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
    pub metrics: Option<MetricSet>,
    pub weights: Option<WeightSummary>,
    /// Digest of the fold partitions; equal across methods for a given seed.
    pub partition_digest: Option<String>,
    pub error: Option<String>,
}

/// Mean and spread of one group of cells across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub noise_level: Option<f64>,
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
    pub n_seeds: usize,
    pub mae_in_mean: f64,
    pub mae_out_mean: f64,
    pub mae_mean: f64,
    /// Sample standard deviations; absent with fewer than two seeds.
    pub mae_in_std: Option<f64>,
    pub mae_out_std: Option<f64>,
    pub mae_std: Option<f64>,
    pub mape_in_mean: Option<f64>,
    pub mape_out_mean: Option<f64>,
}

/// Lowest mean-MAE setting along one sweep axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSetting {
    pub axis: SweepAxis,
    pub value: f64,
    pub mae_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub method: Method,
    pub seed: u64,
    pub setting: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub dataset: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    pub best: Vec<BestSetting>,
    pub timings: Vec<CellTiming>,
}

impl ExperimentReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    /// Aggregate for a method at a noise level, or at a sweep setting.
    pub fn aggregate(
        &self,
        method: Method,
        noise_level: Option<f64>,
        value: Option<f64>,
    ) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.noise_level == noise_level && a.value == value)
    }

    /// Report as JSON without timings; identical for identical inputs.
    pub fn payload(&self) -> Result<serde_json::Value> {
        payload_of(self, "timings")
    }

    /// Writes `report.json` and the experiment's CSV table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let json = write_json(self, &dir.join(REPORT_FILE))?;
        let csv_path = dir.join(self.experiment.csv_file());
        let mut w = csv::Writer::from_path(&csv_path)?;
        for c in &self.cells {
            w.serialize(CsvRow::from_cell(self.experiment, c))?;
        }
        w.flush()?;
        Ok(vec![json, csv_path])
    }
}

#[derive(Serialize)]
struct CsvRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_level: Option<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<Option<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<Option<f64>>,
    method: &'static str,
    seed: u64,
    mae_in: Option<f64>,
    mae_out: Option<f64>,
    mape_in: Option<f64>,
    mape_out: Option<f64>,
    weight_ratio: Option<f64>,
    error: Option<String>,
}

impl CsvRow {
    fn from_cell(kind: ExperimentKind, c: &CellResult) -> Self {
        let m = c.metrics.as_ref();
        Self {
            noise_level: (kind == ExperimentKind::Noise).then_some(c.noise_level),
            axis: (kind == ExperimentKind::Sweep).then(|| c.axis.map(|a| a.to_string())),
            value: (kind == ExperimentKind::Sweep).then_some(c.value),
            method: c.method.label(),
            seed: c.seed,
            mae_in: m.map(|m| m.mae_in),
            mae_out: m.map(|m| m.mae_out),
            mape_in: m.and_then(|m| m.mape_in),
            mape_out: m.and_then(|m| m.mape_out),
            weight_ratio: c.weights.as_ref().and_then(|w| w.ratio),
            error: c.error.clone(),
        }
    }
}

struct CellSpec<'a> {
    bundle: &'a DatasetBundle,
    method: Method,
    seed: u64,
    noise_level: Option<f64>,
    axis: Option<SweepAxis>,
    value: Option<f64>,
}

fn partition_digest(partitions: &[Vec<u64>]) -> Option<String> {
    use sha2::{Digest, Sha256};
    if partitions.is_empty() {
        return None;
    }
    let mut h = Sha256::new();
    for (d, part) in partitions.iter().enumerate() {
        h.update((d as u64).to_le_bytes());
        for id in part {
            h.update(id.to_le_bytes());
        }
    }
    Some(format!("{:x}", h.finalize()))
}

/// Trains one arm with the given seed and evaluates it on the clean test split.
pub fn run_method(
    bundle: &DatasetBundle,
    setup: &ExperimentSetup,
    train: &TrainConfig,
    method: Method,
) -> Result<(RunOutcome, MetricSet)> {
    let mut cfg = train.clone();
    match method {
        Method::WithoutMu => cfg.alpha = 0.0,
        Method::WithoutPc => cfg.beta = 0.0,
        Method::Pgasr | Method::Pn => {}
    }
    let outcome = match method {
        Method::Pn => train_pn_only(bundle, &setup.model, &cfg, None)?,
        _ => run_pgasr(bundle, &setup.model, &cfg, None)?,
    };
    let op = GraphOperator::new(
        &bundle.graph,
        setup.model.chebyshev_order,
        setup.model.lambda_max,
    )?;
    let ctx = TrainContext::new(&op, &bundle.standardizer);
    let metrics = evaluate(
        &outcome.model,
        &bundle.test,
        &ctx,
        cfg.eval_batch,
        setup.mape_threshold,
    )?;
    Ok((outcome, metrics))
}

fn run_cell(spec: &CellSpec<'_>, setup: &ExperimentSetup) -> (CellResult, CellTiming) {
    let started = Instant::now();
    let result = (|| {
        let mut cfg = setup.train.clone();
        cfg.seed = spec.seed;
        if let (Some(axis), Some(value)) = (spec.axis, spec.value) {
            axis.apply(&mut cfg, value)?;
        }
        run_method(spec.bundle, setup, &cfg, spec.method)
    })();
    let mut cell = CellResult {
        method: spec.method,
        seed: spec.seed,
        noise_level: spec.noise_level,
        axis: spec.axis,
        value: spec.value,
        metrics: None,
        weights: None,
        partition_digest: None,
        error: None,
    };
    match result {
        Ok((outcome, metrics)) => {
            cell.metrics = Some(metrics);
            cell.weights = outcome
                .table
                .as_ref()
                .map(|t| WeightSummary::from_table(t, spec.bundle));
            cell.partition_digest = partition_digest(&outcome.partitions);
        }
        Err(e) => {
            log::error!("{} seed {} failed: {e}", spec.method.label(), spec.seed);
            cell.error = Some(e.to_string());
        }
    }
    let timing = CellTiming {
        method: spec.method,
        seed: spec.seed,
        setting: spec.noise_level.or(spec.value),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    (cell, timing)
}

fn run_cells(
    specs: &[CellSpec<'_>],
    setup: &ExperimentSetup,
) -> Result<(Vec<CellResult>, Vec<CellTiming>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.jobs)
        .build()
        .map_err(|e| Error::Pipeline(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| specs.par_iter().map(|s| run_cell(s, setup)).unzip()))
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Method, noise level bits, sweep axis and sweep value bits.
type CellKey = (Method, Option<u64>, Option<SweepAxis>, Option<u64>);

/// Groups successful cells by everything except the seed.
pub fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    let mut seen: Vec<CellKey> = Vec::new();
    for c in cells {
        let key = (
            c.method,
            c.noise_level.map(f64::to_bits),
            c.axis,
            c.value.map(f64::to_bits),
        );
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let group: Vec<&MetricSet> = cells
            .iter()
            .filter(|o| {
                (
                    o.method,
                    o.noise_level.map(f64::to_bits),
                    o.axis,
                    o.value.map(f64::to_bits),
                ) == key
            })
            .filter_map(|o| o.metrics.as_ref())
            .collect();
        if group.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&MetricSet) -> f64| group.iter().map(|m| f(m)).collect::<Vec<f64>>();
        let (mae_in_mean, mae_in_std) = mean_std(&col(&|m| m.mae_in));
        let (mae_out_mean, mae_out_std) = mean_std(&col(&|m| m.mae_out));
        let (mae_mean, mae_std) = mean_std(&col(&|m| m.mae()));
        let opt_mean = |f: &dyn Fn(&MetricSet) -> Option<f64>| {
            let v: Option<Vec<f64>> = group.iter().map(|m| f(m)).collect();
            v.map(|v| mean_std(&v).0)
        };
        out.push(Aggregate {
            method: c.method,
            noise_level: c.noise_level,
            axis: c.axis,
            value: c.value,
            n_seeds: group.len(),
            mae_in_mean,
            mae_out_mean,
            mae_mean,
            mae_in_std,
            mae_out_std,
            mae_std,
            mape_in_mean: opt_mean(&|m| m.mape_in),
            mape_out_mean: opt_mean(&|m| m.mape_out),
        });
    }
    out
}

fn report(
    kind: ExperimentKind,
    bundle: &DatasetBundle,
    setup: &ExperimentSetup,
    seeds: &[u64],
    extra: serde_json::Value,
    (cells, timings): (Vec<CellResult>, Vec<CellTiming>),
) -> Result<ExperimentReport> {
    let aggregates = aggregate(&cells);
    let mut config = serde_json::to_value(setup)?;
    if let Some(obj) = config.as_object_mut() {
        obj.remove("jobs");
        obj.insert("protocol".into(), extra);
    }
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment: kind,
        dataset: bundle.name.clone(),
        config,
        seeds: seeds.to_vec(),
        cells,
        aggregates,
        best: Vec::new(),
        timings,
    })
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    Ok(())
}

/// Injects noise into the training split at each level and compares PN with P-GASR.
///
/// Level 0 trains on the bundle as given. The noise draw depends on the seed
/// and level only, so both methods see the same corrupted samples.
pub fn noise_robustness_experiment(
    bundle: &DatasetBundle,
    levels: &[f64],
    seeds: &[u64],
    setup: &ExperimentSetup,
) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    if levels.is_empty() {
        return Err(Error::config("at least one noise level is required"));
    }
    let mut noisy = Vec::new();
    for &level in levels {
        for &seed in seeds {
            let b = if level == 0.0 {
                bundle.clone()
            } else {
                inject_noise(
                    bundle,
                    level,
                    derive_seed(seed, &[TAG_NOISE, level.to_bits()]),
                )?
            };
            noisy.push((level, seed, b));
        }
    }
    let specs: Vec<CellSpec<'_>> = noisy
        .iter()
        .flat_map(|(level, seed, b)| {
            [Method::Pn, Method::Pgasr].map(|method| CellSpec {
                bundle: b,
                method,
                seed: *seed,
                noise_level: Some(*level),
                axis: None,
                value: None,
            })
        })
        .collect();
    let results = run_cells(&specs, setup)?;
    report(
        ExperimentKind::Noise,
        bundle,
        setup,
        seeds,
        serde_json::json!({ "levels": levels, "noise": "standard normal replacement in standardized space" }),
        results,
    )
}

/// Runs P-GASR, its two single-score variants and PN under identical seeds.
pub fn ablation_experiment(
    bundle: &DatasetBundle,
    seeds: &[u64],
    setup: &ExperimentSetup,
) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let specs: Vec<CellSpec<'_>> = seeds
        .iter()
        .flat_map(|&seed| {
            [
                Method::Pgasr,
                Method::WithoutMu,
                Method::WithoutPc,
                Method::Pn,
            ]
            .map(|method| CellSpec {
                bundle,
                method,
                seed,
                noise_level: None,
                axis: None,
                value: None,
            })
        })
        .collect();
    let results = run_cells(&specs, setup)?;
    report(
        ExperimentKind::Ablation,
        bundle,
        setup,
        seeds,
        serde_json::json!({}),
        results,
    )
}

/// Varies one hyperparameter at a time with the others at their configured values.
pub fn hyperparameter_sweep(
    bundle: &DatasetBundle,
    axes: &[(SweepAxis, Vec<f64>)],
    seeds: &[u64],
    setup: &ExperimentSetup,
) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::config("every sweep axis needs at least one value"));
    }
    for (axis, values) in axes {
        for &v in values {
            axis.apply(&mut setup.train.clone(), v)?;
        }
    }
    let specs: Vec<CellSpec<'_>> = axes
        .iter()
        .flat_map(|(axis, values)| {
            values.iter().flat_map(move |&value| {
                seeds.iter().map(move |&seed| CellSpec {
                    bundle,
                    method: Method::Pgasr,
                    seed,
                    noise_level: None,
                    axis: Some(*axis),
                    value: Some(value),
                })
            })
        })
        .collect();
    let results = run_cells(&specs, setup)?;
    let grid: Vec<serde_json::Value> = axes
        .iter()
        .map(|(a, v)| serde_json::json!({ "axis": a, "values": v }))
        .collect();
    let mut rep = report(
        ExperimentKind::Sweep,
        bundle,
        setup,
        seeds,
        serde_json::json!({ "axes": grid }),
        results,
    )?;
    rep.best = axes
        .iter()
        .filter_map(|(axis, _)| {
            rep.aggregates
                .iter()
                .filter(|a| a.axis == Some(*axis))
                .min_by(|a, b| a.mae_mean.total_cmp(&b.mae_mean))
                .map(|a| BestSetting {
                    axis: *axis,
                    value: a.value.unwrap_or(f64::NAN),
                    mae_mean: a.mae_mean,
                })
        })
        .collect();
    Ok(rep)
}
