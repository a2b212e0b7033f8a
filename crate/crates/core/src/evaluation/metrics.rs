use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datasets::{batch_targets, FlowSample, CHANNELS};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::pipeline::{predict_samples, TrainContext};

/// Targets below this many flow units are excluded from MAPE.
pub const DEFAULT_MAPE_THRESHOLD: f64 = 10.0;

/// Per-direction error metrics in flow units; MAPE in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae_in: f64,
    pub mae_out: f64,
    /// Absent when no inflow target reaches the threshold.
    pub mape_in: Option<f64>,
    pub mape_out: Option<f64>,
    /// Evaluated `(sample, node)` pairs per direction.
    pub n_eval_points: usize,
    pub n_mape_points_in: usize,
    pub n_mape_points_out: usize,
    pub mape_mask_threshold: f64,
}

impl MetricSet {
    /// Mean of inflow and outflow MAE.
    pub fn mae(&self) -> f64 {
        0.5 * (self.mae_in + self.mae_out)
    }
}

/// MAE and masked MAPE over tensors whose last axis is `[inflow, outflow]`.
pub fn compute_metrics(
    y_true: &Tensor<f64>,
    y_pred: &Tensor<f64>,
    mask_threshold: f64,
) -> Result<MetricSet> {
    if y_true.shape() != y_pred.shape() || y_true.shape().last() != Some(&CHANNELS) {
        return Err(Error::config(format!(
            "metric inputs {:?} and {:?} must share a shape ending in 2",
            y_true.shape(),
            y_pred.shape()
        )));
    }
    if y_true.numel() == 0 {
        return Err(Error::config("no points to evaluate"));
    }
    if !y_true.is_finite() || !y_pred.is_finite() {
        return Err(Error::NonFinite("metric inputs".into()));
    }
    let mut abs = [0.0f64; CHANNELS];
    let mut pct = [0.0f64; CHANNELS];
    let mut kept = [0usize; CHANNELS];
    for (pair_t, pair_p) in y_true
        .data()
        .chunks(CHANNELS)
        .zip(y_pred.data().chunks(CHANNELS))
    {
        for c in 0..CHANNELS {
            let err = (pair_t[c] - pair_p[c]).abs();
            abs[c] += err;
            if pair_t[c] >= mask_threshold {
                pct[c] += err / pair_t[c].abs();
                kept[c] += 1;
            }
        }
    }
    let n = y_true.numel() / CHANNELS;
    let mape = |c: usize| (kept[c] > 0).then(|| 100.0 * pct[c] / kept[c] as f64);
    Ok(MetricSet {
        mae_in: abs[0] / n as f64,
        mae_out: abs[1] / n as f64,
        mape_in: mape(0),
        mape_out: mape(1),
        n_eval_points: n,
        n_mape_points_in: kept[0],
        n_mape_points_out: kept[1],
        mape_mask_threshold: mask_threshold,
    })
}

/// Metrics of a model's dropout-free predictions on `samples`.
pub fn evaluate(
    state: &ModelState,
    samples: &[FlowSample],
    ctx: &TrainContext<'_>,
    batch: usize,
    mask_threshold: f64,
) -> Result<MetricSet> {
    let refs: Vec<&FlowSample> = samples.iter().collect();
    let pred = predict_samples(state, &refs, ctx, batch)?;
    let truth = batch_targets::<f64>(&refs);
    compute_metrics(&truth, &pred, mask_threshold)
}
