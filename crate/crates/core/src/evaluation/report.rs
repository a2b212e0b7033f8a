use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::MetricSet;
use crate::datasets::DatasetBundle;
use crate::error::Result;
use crate::pipeline::PhaseRecord;
use crate::reweighting::WeightTable;

/// Version of the `report.json` layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

/// Mean normalized weight of corrupted versus clean training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub n_samples: usize,
    pub n_corrupted: usize,
    pub mean_corrupted: Option<f64>,
    pub mean_clean: Option<f64>,
    /// `mean_corrupted / mean_clean`.
    pub ratio: Option<f64>,
}

impl WeightSummary {
    pub fn from_table(table: &WeightTable, bundle: &DatasetBundle) -> Self {
        let corrupted: HashSet<u64> = bundle.corrupted_train_ids().into_iter().collect();
        let mean = |flag: bool| {
            let vals: Vec<f64> = table
                .rows
                .iter()
                .filter(|r| corrupted.contains(&r.sample_id) == flag)
                .map(|r| r.epsilon_tilde)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let (mean_corrupted, mean_clean) = (mean(true), mean(false));
        Self {
            n_samples: table.len(),
            n_corrupted: table
                .rows
                .iter()
                .filter(|r| corrupted.contains(&r.sample_id))
                .count(),
            mean_corrupted,
            mean_clean,
            ratio: mean_corrupted.zip(mean_clean).map(|(c, k)| c / k),
        }
    }
}

/// Phase outcome without execution details.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: String,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
}

/// Wall times and resumption flags, kept apart from the deterministic payload.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub wall_time_s: BTreeMap<String, f64>,
    pub resumed: Vec<String>,
}

/// Result of a single `train` invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub dataset: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub test: MetricSet,
    pub weights: Option<WeightSummary>,
    pub phases: Vec<PhaseSummary>,
    pub execution: Execution,
}

impl RunReport {
    pub fn phases_from(records: &[PhaseRecord]) -> (Vec<PhaseSummary>, Execution) {
        let mut exec = Execution::default();
        let phases = records
            .iter()
            .map(|r| {
                exec.wall_time_s.insert(r.phase.clone(), r.wall_time_s);
                if r.resumed {
                    exec.resumed.push(r.phase.clone());
                }
                PhaseSummary {
                    phase: r.phase.clone(),
                    best_epoch: r.best_epoch,
                    best_val_mae: r.best_val_mae,
                }
            })
            .collect();
        (phases, exec)
    }

    /// Report as JSON without the execution section.
    pub fn payload(&self) -> Result<serde_json::Value> {
        payload_of(self, "execution")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        write_json(self, &dir.join(REPORT_FILE))
    }
}

pub(crate) fn payload_of<T: Serialize>(value: &T, drop_key: &str) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(value)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove(drop_key);
    }
    Ok(v)
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<PathBuf> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    fs::rename(&tmp, path)?;
    Ok(path.to_path_buf())
}
