//! Active reweighting policy.
//!
//! Each training sample is scored by a fold model that never saw it: model
//! uncertainty `u` is the MC-dropout variance of its prediction and physical
//! consistency `c` is the reciprocal squared deviation of the prediction from
//! the neighbor-aggregated last observed flows. Scores are min-max scaled per
//! fold, combined as `ε = α·u + β·c`, and turned into training weights with a
//! softmax plus `b = 1/N` over chunks of `N` consecutive samples.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datasets::{batch_inputs, FlowSample, Standardizer, CHANNELS};
use crate::error::{Error, Result};
use crate::grid_graph::{GraphOperator, UrbanGraph};
use crate::model::ModelState;
use crate::seeding::derive_seed;

/// Guard keeping the consistency score finite at exact conservation.
pub const CONSISTENCY_GUARD: f64 = 1e-8;

/// Matrix used to aggregate neighbor flows in the consistency score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Neighbor mean.
    #[default]
    RowNormalized,
    /// Neighbor sum.
    Binary,
}

impl Aggregation {
    pub fn matrix(self, graph: &UrbanGraph) -> &Tensor<f64> {
        match self {
            Self::RowNormalized => graph.row_normalized_adjacency(),
            Self::Binary => graph.adjacency(),
        }
    }
}

/// What the aggregated flows are compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyTarget {
    /// The fold model's dropout-free prediction.
    #[default]
    Prediction,
    /// The sample's recorded target.
    Label,
}

/// Unbiased variance over `K` passes, averaged over nodes and channels.
///
/// `stack[k]` has shape `[B, ...]`; the result has one entry per sample.
pub fn model_uncertainty(stack: &[Tensor<f64>]) -> Result<Vec<f64>> {
    let k = stack.len();
    if k < 2 {
        return Err(Error::config(format!(
            "uncertainty needs at least 2 passes, got {k}"
        )));
    }
    let shape = stack[0].shape();
    if stack.iter().any(|t| t.shape() != shape) {
        return Err(Error::config("MC passes have differing shapes"));
    }
    if stack.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("MC-dropout predictions".into()));
    }
    let batch = shape[0];
    let per = stack[0].numel() / batch.max(1);
    let kf = k as f64;
    Ok((0..batch)
        .map(|b| {
            let mut total = 0.0;
            for i in b * per..(b + 1) * per {
                // Welford update
                let (mut mean, mut m2) = (0.0, 0.0);
                for (n, t) in stack.iter().enumerate() {
                    let v = t.data()[i];
                    let delta = v - mean;
                    mean += delta / (n + 1) as f64;
                    m2 += delta * (v - mean);
                }
                total += m2 / (kf - 1.0);
            }
            total / per as f64
        })
        .collect())
}

/// `1 / (mean((y − A_agg · x_last)²) + 1e-8)` per sample, in flow units.
///
/// `y` and `x_last` have shape `[B, M, 2]`; `aggregation` is `M × M`.
pub fn physical_consistency(
    y: &Tensor<f64>,
    x_last: &Tensor<f64>,
    aggregation: &Tensor<f64>,
) -> Result<Vec<f64>> {
    if y.shape() != x_last.shape() || y.shape().len() != 3 {
        return Err(Error::config(format!(
            "prediction {:?} and last step {:?} must share a [B, M, 2] shape",
            y.shape(),
            x_last.shape()
        )));
    }
    if !y.is_finite() || !x_last.is_finite() {
        return Err(Error::NonFinite("consistency inputs".into()));
    }
    let aggregated = x_last.node_mix(aggregation);
    let per = y.numel() / y.shape()[0].max(1);
    Ok(y.data()
        .chunks(per)
        .zip(aggregated.data().chunks(per))
        .map(|(yp, agg)| {
            let d2 = yp
                .iter()
                .zip(agg)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / per as f64;
            1.0 / (d2 + CONSISTENCY_GUARD)
        })
        .collect())
}

/// `(v − min) / (max − min)`, or 0.5 everywhere for a constant input.
pub fn minmax_per_fold(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !range.is_finite() || range <= 0.0 {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / range).collect()
}

pub fn combine_scores(u_norm: &[f64], c_norm: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    assert_eq!(u_norm.len(), c_norm.len());
    u_norm
        .iter()
        .zip(c_norm)
        .map(|(u, c)| alpha * u + beta * c)
        .collect()
}

/// Softmax over the chunk plus `b = 1/N`; the result sums to 2.
pub fn normalize_weights(eps: &[f64]) -> Vec<f64> {
    if eps.is_empty() {
        return Vec::new();
    }
    let b = 1.0 / eps.len() as f64;
    let max = eps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = eps.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total + b).collect()
}

/// One row of the weight table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub sample_id: u64,
    pub fold: usize,
    pub chunk: usize,
    pub u_raw: f64,
    pub c_raw: f64,
    pub u_norm: f64,
    pub c_norm: f64,
    pub epsilon: f64,
    pub epsilon_tilde: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightTable {
    pub rows: Vec<WeightRow>,
}

impl WeightTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `sample_id → ε̃`.
    pub fn weights(&self) -> HashMap<u64, f64> {
        self.rows
            .iter()
            .map(|r| (r.sample_id, r.epsilon_tilde))
            .collect()
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let bytes = self.to_csv_bytes()?;
        let tmp = path.with_extension("csv.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<WeightRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Mean `ε̃` of corrupted and clean samples, when both groups are present.
    pub fn mean_by_flag(&self, corrupted: &HashSet<u64>) -> Option<(f64, f64)> {
        let (mut sc, mut nc, mut sk, mut nk) = (0.0, 0usize, 0.0, 0usize);
        for r in &self.rows {
            if corrupted.contains(&r.sample_id) {
                sc += r.epsilon_tilde;
                nc += 1;
            } else {
                sk += r.epsilon_tilde;
                nk += 1;
            }
        }
        (nc > 0 && nk > 0).then(|| (sc / nc as f64, sk / nk as f64))
    }
}

/// Options of [`build_weight_table`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub alpha: f64,
    pub beta: f64,
    /// MC-dropout passes.
    pub mc_passes: usize,
    /// Normalization chunk length (the training batch size).
    pub chunk_size: usize,
    /// Samples per inference batch.
    pub inference_batch: usize,
    pub aggregation: Aggregation,
    pub target: ConsistencyTarget,
    pub seed: u64,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.9,
            mc_passes: 10,
            chunk_size: 32,
            inference_batch: 64,
            aggregation: Aggregation::RowNormalized,
            target: ConsistencyTarget::Prediction,
            seed: 0,
        }
    }
}

/// Raw `(u, c)` of every sample in a partition under one fold model.
pub fn score_partition(
    model: &ModelState,
    samples: &[&FlowSample],
    op: &GraphOperator,
    graph: &UrbanGraph,
    standardizer: &Standardizer,
    cfg: &ReweightConfig,
    fold: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let agg = cfg.aggregation.matrix(graph);
    let mut u = Vec::with_capacity(samples.len());
    let mut c = Vec::with_capacity(samples.len());
    for (bi, batch) in samples.chunks(cfg.inference_batch.max(1)).enumerate() {
        let x = batch_inputs::<f32>(batch, standardizer);
        let seed = derive_seed(cfg.seed, &[fold as u64, bi as u64]);
        let stack: Vec<Tensor<f64>> = model
            .forward_mc(op, &x, cfg.mc_passes, seed)?
            .iter()
            .map(|p| standardizer.destandardize(&p.cast::<f64>()))
            .collect();
        u.extend(model_uncertainty(&stack)?);

        let m = model.num_nodes;
        let target = match cfg.target {
            ConsistencyTarget::Prediction => {
                standardizer.destandardize(&model.predict(op, &x)?.cast::<f64>())
            }
            ConsistencyTarget::Label => Tensor::new(
                vec![batch.len(), m, CHANNELS],
                batch
                    .iter()
                    .flat_map(|s| s.y.data().iter().map(|&v| v as f64))
                    .collect(),
            ),
        };
        let last = Tensor::new(
            vec![batch.len(), m, CHANNELS],
            batch
                .iter()
                .flat_map(|s| s.last_step().iter().map(|&v| v as f64))
                .collect(),
        );
        c.extend(physical_consistency(&target, &last, agg)?);
    }
    Ok((u, c))
}

/// Scores every partition with its fold model and assembles the weight table.
///
/// Rows follow partition order; chunk indices run across folds.
pub fn build_weight_table(
    models: &[ModelState],
    partitions: &[Vec<&FlowSample>],
    op: &GraphOperator,
    graph: &UrbanGraph,
    standardizer: &Standardizer,
    cfg: &ReweightConfig,
) -> Result<WeightTable> {
    if models.len() != partitions.len() {
        return Err(Error::Pipeline(format!(
            "{} fold models for {} partitions",
            models.len(),
            partitions.len()
        )));
    }
    if cfg.chunk_size == 0 {
        return Err(Error::config("chunk size must be positive"));
    }
    let mut seen = HashSet::new();
    for part in partitions {
        if part.is_empty() {
            return Err(Error::Pipeline("empty fold partition".into()));
        }
        for s in part {
            if !seen.insert(s.id) {
                return Err(Error::Pipeline(format!(
                    "sample {} appears in two partitions",
                    s.id
                )));
            }
        }
    }

    let scores = models
        .par_iter()
        .zip(partitions.par_iter())
        .enumerate()
        .map(|(fold, (model, part))| {
            score_partition(model, part, op, graph, standardizer, cfg, fold)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(seen.len());
    let mut chunk = 0;
    for (fold, (part, (u_raw, c_raw))) in partitions.iter().zip(scores).enumerate() {
        let u_norm = minmax_per_fold(&u_raw);
        let c_norm = minmax_per_fold(&c_raw);
        let eps = combine_scores(&u_norm, &c_norm, cfg.alpha, cfg.beta);
        for (start, block) in eps
            .chunks(cfg.chunk_size)
            .enumerate()
            .map(|(i, b)| (i * cfg.chunk_size, b))
        {
            for (offset, w) in normalize_weights(block).into_iter().enumerate() {
                let i = start + offset;
                rows.push(WeightRow {
                    sample_id: part[i].id,
                    fold,
                    chunk,
                    u_raw: u_raw[i],
                    c_raw: c_raw[i],
                    u_norm: u_norm[i],
                    c_norm: c_norm[i],
                    epsilon: eps[i],
                    epsilon_tilde: w,
                });
            }
            chunk += 1;
        }
    }
    Ok(WeightTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_graph::Neighborhood;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data)
    }

    #[test]
    fn uncertainty_examples() {
        let same = vec![t(&[1, 1, 2], vec![1.0, 2.0]); 3];
        assert_eq!(model_uncertainty(&same).unwrap(), vec![0.0]);
        let two = [t(&[1, 1, 1], vec![1.0]), t(&[1, 1, 1], vec![3.0])];
        assert_eq!(model_uncertainty(&two).unwrap(), vec![2.0]);
        assert!(model_uncertainty(&two[..1]).is_err());
    }

    #[test]
    fn consistency_examples() {
        let g = UrbanGraph::grid(1, 2, Neighborhood::Four).unwrap();
        let agg = g.row_normalized_adjacency();
        // aggregation swaps the two nodes
        let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let exact = t(&[1, 2, 2], vec![3.0, 4.0, 1.0, 2.0]);
        assert_eq!(
            physical_consistency(&exact, &x, agg).unwrap(),
            vec![1.0 / CONSISTENCY_GUARD]
        );
        let off = exact.map(|v| v + 2.0);
        let c = physical_consistency(&off, &x, agg).unwrap()[0];
        assert!((c - 0.25).abs() < 1e-8);
        let bad = t(&[1, 2, 2], vec![f64::NAN, 0.0, 0.0, 0.0]);
        assert!(physical_consistency(&bad, &x, agg).is_err());
    }

    #[test]
    fn combine_and_minmax_examples() {
        let eps = combine_scores(&[0.5], &[0.2], 0.8, 0.9);
        assert!((eps[0] - 0.58).abs() < 1e-12);
        assert_eq!(minmax_per_fold(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_per_fold(&[3.0; 4]), vec![0.5; 4]);
        assert_eq!(
            combine_scores(&[0.3, 0.9], &[0.1, 1.0], 0.0, 0.0),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[0.0; 4]), vec![0.5; 4]);
        let w = normalize_weights(&[2f64.ln(), 0.0]);
        assert!((w[0] - 7.0 / 6.0).abs() < 1e-12 && (w[1] - 5.0 / 6.0).abs() < 1e-12);
        let huge = normalize_weights(&[1e6, -1e6, 0.0]);
        assert!(huge.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn chunk_sum_and_bounds(eps in prop::collection::vec(-10.0f64..10.0, 1..80)) {
            let w = normalize_weights(&eps);
            let n = eps.len() as f64;
            prop_assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-6);
            if eps.len() == 1 {
                prop_assert_eq!(w[0], 2.0);
            } else {
                for &v in &w {
                    prop_assert!(v > 1.0 / n && v < 1.0 + 1.0 / n);
                }
            }
            for i in 0..eps.len() {
                for j in 0..eps.len() {
                    if eps[i] > eps[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }

        #[test]
        fn minmax_preserves_order(raw in prop::collection::vec(-1e3f64..1e3, 1..50)) {
            let n = minmax_per_fold(&raw);
            for i in 0..raw.len() {
                prop_assert!((0.0..=1.0).contains(&n[i]));
                for j in 0..raw.len() {
                    if raw[i] < raw[j] {
                        prop_assert!(n[i] < n[j]);
                    }
                }
            }
        }

        #[test]
        fn uncertainty_is_shift_invariant(vals in prop::collection::vec(-10.0f64..10.0, 6), shift in -100.0f64..100.0) {
            let stack: Vec<_> = vals.chunks(2).map(|c| t(&[1, 1, 2], c.to_vec())).collect();
            let moved: Vec<_> = stack.iter().map(|s| s.map(|v| v + shift)).collect();
            let (a, b) = (model_uncertainty(&stack).unwrap()[0], model_uncertainty(&moved).unwrap()[0]);
            prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
        }

        #[test]
        fn identical_passes_have_zero_uncertainty(vals in prop::collection::vec(-1e4f64..1e4, 6), k in 2usize..12) {
            let stack: Vec<_> = (0..k).map(|_| t(&[3, 1, 2], vals.clone())).collect();
            prop_assert!(model_uncertainty(&stack).unwrap().iter().all(|&u| u == 0.0));
        }

        #[test]
        fn larger_deviation_lowers_consistency(dev in prop::collection::vec(-5.0f64..5.0, 4), scale in 1.01f64..10.0) {
            prop_assume!(dev.iter().any(|v| v.abs() > 1e-3));
            let g = UrbanGraph::grid(1, 2, Neighborhood::Four).unwrap();
            let agg = g.row_normalized_adjacency();
            let x = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
            let base = x.node_mix(agg);
            let near: Vec<f64> = base.data().iter().zip(&dev).map(|(b, d)| b + d).collect();
            let far: Vec<f64> = base.data().iter().zip(&dev).map(|(b, d)| b + d * scale).collect();
            let c_near = physical_consistency(&t(&[1, 2, 2], near), &x, agg).unwrap()[0];
            let c_far = physical_consistency(&t(&[1, 2, 2], far), &x, agg).unwrap()[0];
            prop_assert!(c_far < c_near);
        }
    }
}
