//! End-to-end runs with a resumable run directory.
//!
//! A run directory holds `fold_{d}.ckpt` for every pretrained fold model,
//! `weight_table.csv`, `retrain.ckpt` (or `model.ckpt` for single-phase
//! runs), `phase_records.json` and a fingerprint of the configuration and
//! data. Rerunning with the same fingerprint reuses whichever artifacts are
//! already present.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::trainer::{TrainContext, Trainer};
use super::{split_folds, PhaseRecord, TrainConfig};
use crate::datasets::{DatasetBundle, FlowSample};
use crate::error::{Error, Result};
use crate::grid_graph::GraphOperator;
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, ModelState};
use crate::reweighting::{build_weight_table, ReweightConfig, WeightTable};
use crate::seeding::derive_seed;

pub const FINGERPRINT_FILE: &str = "fingerprint.txt";
pub const PHASE_RECORDS_FILE: &str = "phase_records.json";
pub const WEIGHT_TABLE_FILE: &str = "weight_table.csv";

// seed tags per phase
const TAG_FOLD_INIT: u64 = 10;
const TAG_FOLD_FIT: u64 = 11;
const TAG_FINAL_INIT: u64 = 20;
const TAG_FINAL_FIT: u64 = 21;
const TAG_WEIGHTS: u64 = 30;

/// Final model plus everything needed to report on the run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: ModelState,
    pub table: Option<WeightTable>,
    pub records: Vec<PhaseRecord>,
    /// Sample ids of each fold partition (empty for single-phase runs).
    pub partitions: Vec<Vec<u64>>,
}

/// SHA-256 over sample ids, flows and corruption flags of every split.
pub fn bundle_digest(bundle: &DatasetBundle) -> String {
    let mut h = Sha256::new();
    for s in bundle.all_samples() {
        h.update(s.id.to_le_bytes());
        h.update([u8::from(s.corrupted)]);
        for v in s.x.data().iter().chain(s.y.data()) {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn fingerprint(
    kind: &str,
    bundle: &DatasetBundle,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<String> {
    let payload = serde_json::json!({
        "kind": kind,
        "data": bundle_digest(bundle),
        "model": model,
        "train": train,
    });
    Ok(format!(
        "{:x}",
        Sha256::digest(serde_json::to_vec(&payload)?)
    ))
}

struct RunDir {
    path: Option<PathBuf>,
}

impl RunDir {
    fn open(path: Option<&Path>, fingerprint: &str) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self { path: None });
        };
        fs::create_dir_all(path)?;
        let fp_path = path.join(FINGERPRINT_FILE);
        if fp_path.exists() {
            let existing = fs::read_to_string(&fp_path)?;
            if existing.trim() != fingerprint {
                return Err(Error::Pipeline(format!(
                    "{} holds a run with a different configuration or dataset",
                    path.display()
                )));
            }
        } else {
            fs::write(&fp_path, fingerprint)?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
        })
    }

    fn file(&self, name: &str) -> Option<PathBuf> {
        self.path.as_ref().map(|p| p.join(name))
    }

    fn existing(&self, name: &str) -> Option<PathBuf> {
        self.file(name).filter(|p| p.exists())
    }

    fn write_records(&self, records: &[PhaseRecord]) -> Result<()> {
        if let Some(p) = self.file(PHASE_RECORDS_FILE) {
            fs::write(p, serde_json::to_string_pretty(records)?)?;
        }
        Ok(())
    }
}

/// Trains (or restores) one model and checkpoints it.
#[allow(clippy::too_many_arguments)]
fn train_phase(
    phase: &str,
    ckpt_name: &str,
    fold: Option<usize>,
    dir: &RunDir,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ctx: &TrainContext<'_>,
    bundle: &DatasetBundle,
    train: &[&FlowSample],
    weights: Option<&HashMap<u64, f64>>,
    patience: usize,
    seeds: (u64, u64),
) -> Result<(ModelState, PhaseRecord)> {
    let started = Instant::now();
    if let Some(path) = dir.existing(ckpt_name) {
        let (state, meta) = load_checkpoint(&path)?;
        log::info!("{phase}: restored from {}", path.display());
        return Ok((
            state,
            PhaseRecord {
                phase: phase.to_string(),
                best_epoch: Some(meta.epoch),
                best_val_mae: Some(meta.val_score),
                wall_time_s: started.elapsed().as_secs_f64(),
                checkpoint: Some(ckpt_name.to_string()),
                resumed: true,
            },
        ));
    }
    let init = ModelState::new(
        model_cfg.clone(),
        bundle.num_nodes(),
        bundle.input_len(),
        seeds.0,
    )?;
    let val: Vec<&FlowSample> = bundle.val.iter().collect();
    let outcome = Trainer::new(init, ctx, cfg).fit(train, weights, &val, patience, seeds.1)?;
    log::info!(
        "{phase}: best epoch {} of {}, validation MAE {:.4}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_mae
    );
    let checkpoint = match dir.file(ckpt_name) {
        Some(path) => {
            let meta = CheckpointMeta {
                phase: phase.to_string(),
                fold,
                epoch: outcome.best_epoch,
                val_score: outcome.best_val_mae,
                seed: seeds.0,
                standardizer: Some(bundle.standardizer.clone()),
            };
            save_checkpoint(&path, &outcome.state, &meta)?;
            Some(ckpt_name.to_string())
        }
        None => None,
    };
    Ok((
        outcome.state,
        PhaseRecord {
            phase: phase.to_string(),
            best_epoch: Some(outcome.best_epoch),
            best_val_mae: Some(outcome.best_val_mae),
            wall_time_s: started.elapsed().as_secs_f64(),
            checkpoint,
            resumed: false,
        },
    ))
}

fn operator(bundle: &DatasetBundle, model_cfg: &ModelConfig) -> Result<GraphOperator> {
    GraphOperator::new(
        &bundle.graph,
        model_cfg.chebyshev_order,
        model_cfg.lambda_max,
    )
}

fn check_inputs(bundle: &DatasetBundle, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    model_cfg.validate_for(bundle.input_len())?;
    bundle.validate()
}

/// Fold models, weight table and phase records of the first two stages.
#[derive(Clone, Debug)]
pub struct WeightStage {
    pub fold_models: Vec<ModelState>,
    pub table: WeightTable,
    pub records: Vec<PhaseRecord>,
    /// Sample ids of each fold partition.
    pub partitions: Vec<Vec<u64>>,
}

/// Fold pretraining followed by held-out weight inference.
pub fn infer_weights(
    bundle: &DatasetBundle,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<WeightStage> {
    check_inputs(bundle, model_cfg, cfg)?;
    let dir = RunDir::open(run_dir, &fingerprint("pgasr", bundle, model_cfg, cfg)?)?;
    let op = operator(bundle, model_cfg)?;
    let ctx = TrainContext::new(&op, &bundle.standardizer);
    weight_stage(bundle, model_cfg, cfg, &dir, &op, &ctx)
}

fn weight_stage(
    bundle: &DatasetBundle,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dir: &RunDir,
    op: &GraphOperator,
    ctx: &TrainContext<'_>,
) -> Result<WeightStage> {
    let train: Vec<&FlowSample> = bundle.train.iter().collect();
    let ranges = split_folds(train.len(), cfg.folds)?;
    let partitions: Vec<Vec<&FlowSample>> =
        ranges.iter().map(|r| train[r.clone()].to_vec()).collect();

    let folds = ranges
        .par_iter()
        .enumerate()
        .map(|(d, held_out)| {
            let warmup: Vec<&FlowSample> = train
                .iter()
                .enumerate()
                .filter(|(i, _)| !held_out.contains(i))
                .map(|(_, s)| *s)
                .collect();
            train_phase(
                &format!("pretrain_fold_{d}"),
                &format!("fold_{d}.ckpt"),
                Some(d),
                dir,
                model_cfg,
                cfg,
                ctx,
                bundle,
                &warmup,
                None,
                cfg.patience_pretrain,
                (
                    derive_seed(cfg.seed, &[TAG_FOLD_INIT, d as u64]),
                    derive_seed(cfg.seed, &[TAG_FOLD_FIT, d as u64]),
                ),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (fold_models, mut records): (Vec<ModelState>, Vec<PhaseRecord>) = folds.into_iter().unzip();
    dir.write_records(&records)?;

    let started = Instant::now();
    let (table, resumed) = match dir.existing(WEIGHT_TABLE_FILE) {
        Some(path) => (WeightTable::read_csv(&path)?, true),
        None => {
            let rcfg = ReweightConfig {
                alpha: cfg.alpha,
                beta: cfg.beta,
                mc_passes: cfg.mc_passes,
                chunk_size: cfg.batch_size,
                inference_batch: cfg.eval_batch,
                aggregation: cfg.aggregation,
                target: cfg.consistency_target,
                seed: derive_seed(cfg.seed, &[TAG_WEIGHTS]),
            };
            let table = build_weight_table(
                &fold_models,
                &partitions,
                op,
                &bundle.graph,
                &bundle.standardizer,
                &rcfg,
            )?;
            if let Some(path) = dir.file(WEIGHT_TABLE_FILE) {
                table.write_csv(&path)?;
            }
            (table, false)
        }
    };
    if table.len() != train.len() {
        return Err(Error::Pipeline(format!(
            "weight table covers {} of {} training samples",
            table.len(),
            train.len()
        )));
    }
    records.push(PhaseRecord {
        phase: "infer_weights".into(),
        best_epoch: None,
        best_val_mae: None,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: dir
            .file(WEIGHT_TABLE_FILE)
            .map(|_| WEIGHT_TABLE_FILE.to_string()),
        resumed,
    });
    dir.write_records(&records)?;
    Ok(WeightStage {
        fold_models,
        table,
        records,
        partitions: partitions
            .iter()
            .map(|p| p.iter().map(|s| s.id).collect())
            .collect(),
    })
}

/// Fold pretraining, held-out weight inference and weighted retraining.
pub fn run_pgasr(
    bundle: &DatasetBundle,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<RunOutcome> {
    check_inputs(bundle, model_cfg, cfg)?;
    let dir = RunDir::open(run_dir, &fingerprint("pgasr", bundle, model_cfg, cfg)?)?;
    let op = operator(bundle, model_cfg)?;
    let ctx = TrainContext::new(&op, &bundle.standardizer);
    let stage = weight_stage(bundle, model_cfg, cfg, &dir, &op, &ctx)?;
    let mut records = stage.records;

    let train: Vec<&FlowSample> = bundle.train.iter().collect();
    let weights = stage.table.weights();
    let (model, record) = train_phase(
        "retrain",
        "retrain.ckpt",
        None,
        &dir,
        model_cfg,
        cfg,
        &ctx,
        bundle,
        &train,
        Some(&weights),
        cfg.patience_retrain,
        (
            derive_seed(cfg.seed, &[TAG_FINAL_INIT]),
            derive_seed(cfg.seed, &[TAG_FINAL_FIT]),
        ),
    )?;
    records.push(record);
    dir.write_records(&records)?;
    Ok(RunOutcome {
        model,
        table: Some(stage.table),
        records,
        partitions: stage.partitions,
    })
}

/// Single-phase unweighted training on the whole training split.
///
/// Initialization and batch order use the same seeds as the retraining phase
/// of [`run_pgasr`], so the two differ only in the sample weights.
pub fn train_pn_only(
    bundle: &DatasetBundle,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<RunOutcome> {
    check_inputs(bundle, model_cfg, cfg)?;
    let dir = RunDir::open(run_dir, &fingerprint("pn", bundle, model_cfg, cfg)?)?;
    let op = operator(bundle, model_cfg)?;
    let ctx = TrainContext::new(&op, &bundle.standardizer);
    let train: Vec<&FlowSample> = bundle.train.iter().collect();
    let (model, record) = train_phase(
        "train",
        "model.ckpt",
        None,
        &dir,
        model_cfg,
        cfg,
        &ctx,
        bundle,
        &train,
        None,
        cfg.patience_retrain,
        (
            derive_seed(cfg.seed, &[TAG_FINAL_INIT]),
            derive_seed(cfg.seed, &[TAG_FINAL_FIT]),
        ),
    )?;
    let records = vec![record];
    dir.write_records(&records)?;
    Ok(RunOutcome {
        model,
        table: None,
        records,
        partitions: Vec::new(),
    })
}
