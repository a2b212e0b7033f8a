//! D-fold pretraining, held-out weight inference and weighted retraining.

mod optim;
mod run;
mod trainer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::reweighting::{Aggregation, ConsistencyTarget};

pub use optim::{clip_global_norm, Adam};
pub use run::{
    bundle_digest, infer_weights, run_pgasr, train_pn_only, RunOutcome, WeightStage,
    FINGERPRINT_FILE, PHASE_RECORDS_FILE, WEIGHT_TABLE_FILE,
};
pub use trainer::{
    predict_samples, validation_mae, EpochStats, TrainContext, TrainOutcome, Trainer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the inflow term; outflow gets `1 − λ`.
    pub lambda_balance: f64,
    /// Number of folds `D`.
    pub folds: usize,
    pub alpha: f64,
    pub beta: f64,
    /// MC-dropout passes `K`.
    pub mc_passes: usize,
    pub patience_pretrain: usize,
    pub patience_retrain: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm bound.
    pub grad_clip: f64,
    /// Samples per inference batch.
    pub eval_batch: usize,
    pub aggregation: Aggregation,
    pub consistency_target: ConsistencyTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            lambda_balance: 0.5,
            folds: 2,
            alpha: 0.8,
            beta: 0.9,
            mc_passes: 10,
            patience_pretrain: 15,
            patience_retrain: 30,
            max_epochs: 200,
            seed: 0,
            grad_clip: 5.0,
            eval_batch: 64,
            aggregation: Aggregation::RowNormalized,
            consistency_target: ConsistencyTarget::Prediction,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_balance) {
            return Err(Error::config(format!(
                "lambda_balance {} outside [0, 1]",
                self.lambda_balance
            )));
        }
        if self.folds < 2 {
            return Err(Error::config("at least two folds are required"));
        }
        if self.patience_pretrain == 0 || self.patience_retrain == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch sizes and max_epochs must be positive"));
        }
        if self.mc_passes < 2 {
            return Err(Error::config("mc_passes must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be positive"));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::config("alpha and beta must be finite"));
        }
        Ok(())
    }
}

/// Contiguous near-equal parts of `0..n`; earlier parts take the remainder.
pub fn split_folds(n: usize, folds: usize) -> Result<Vec<Range<usize>>> {
    if folds == 0 || folds > n {
        return Err(Error::config(format!(
            "cannot split {n} samples into {folds} folds"
        )));
    }
    let base = n / folds;
    let extra = n % folds;
    let mut start = 0;
    Ok((0..folds)
        .map(|d| {
            let len = base + usize::from(d < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect())
}

/// `Σ_i w_i · mean_nodes(λ|y_in − ŷ_in| + (1 − λ)|y_out − ŷ_out|)` on `[B, M, 2]` tensors.
pub fn weighted_loss(
    y: &Tensor<f64>,
    y_hat: &Tensor<f64>,
    weights: &[f64],
    lambda: f64,
) -> Result<f64> {
    if y.shape() != y_hat.shape() || y.shape().len() != 3 || y.shape()[2] != 2 {
        return Err(Error::config(format!(
            "loss shapes {:?} / {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if weights.len() != y.shape()[0] {
        return Err(Error::Pipeline(format!(
            "{} weights for a batch of {}",
            weights.len(),
            y.shape()[0]
        )));
    }
    let per = y.numel() / weights.len().max(1);
    let nodes = (per / 2) as f64;
    Ok(weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let range = i * per..(i + 1) * per;
            let term: f64 = y.data()[range.clone()]
                .chunks(2)
                .zip(y_hat.data()[range].chunks(2))
                .map(|(a, b)| lambda * (a[0] - b[0]).abs() + (1.0 - lambda) * (a[1] - b[1]).abs())
                .sum();
            w * term / nodes
        })
        .sum())
}

/// Unweighted pretraining loss.
pub fn pretrain_loss(y: &Tensor<f64>, y_hat: &Tensor<f64>, lambda: f64) -> Result<f64> {
    weighted_loss(
        y,
        y_hat,
        &vec![1.0; y.shape().first().copied().unwrap_or(0)],
        lambda,
    )
}

/// Outcome of one pipeline phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// `pretrain_fold_{d}`, `infer_weights`, `retrain` or `train`.
    pub phase: String,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub wall_time_s: f64,
    pub checkpoint: Option<String>,
    /// Restored from an earlier run directory instead of recomputed.
    pub resumed: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: Vec<f64>) -> Tensor<f64> {
        let b = data.len() / 2;
        Tensor::new(vec![b, 1, 2], data)
    }

    #[test]
    fn fold_examples() {
        assert_eq!(split_folds(10, 2).unwrap(), vec![0..5, 5..10]);
        assert_eq!(split_folds(11, 2).unwrap(), vec![0..6, 6..11]);
        assert!(split_folds(3, 4).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 1usize..500, d in 1usize..8) {
            prop_assume!(d <= n);
            let parts = split_folds(n, d).unwrap();
            prop_assert_eq!(parts.len(), d);
            prop_assert_eq!(parts[0].start, 0);
            prop_assert_eq!(parts[d - 1].end, n);
            for w in parts.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            let lens: Vec<usize> = parts.iter().map(|r| r.len()).collect();
            prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }

        #[test]
        fn positive_weights_vanish_only_at_exact_fit(
            y in prop::collection::vec(0.0f64..50.0, 6),
            noise in prop::collection::vec(-1.0f64..1.0, 6),
            w in prop::collection::vec(0.01f64..2.0, 3),
        ) {
            let exact = weighted_loss(&t(y.clone()), &t(y.clone()), &w, 0.5).unwrap();
            prop_assert_eq!(exact, 0.0);
            let off: Vec<f64> = y.iter().zip(&noise).map(|(a, n)| a + n).collect();
            let loss = weighted_loss(&t(y), &t(off), &w, 0.5).unwrap();
            prop_assert!(loss > 0.0 || noise.iter().all(|n| *n == 0.0));
        }
    }

    #[test]
    fn loss_examples() {
        let y = Tensor::new(vec![1, 1, 2], vec![2.0, 4.0]);
        let yh = Tensor::new(vec![1, 1, 2], vec![3.0, 3.0]);
        assert_eq!(pretrain_loss(&y, &yh, 0.5).unwrap(), 1.0);
        let inflow_only = Tensor::new(vec![1, 1, 2], vec![3.0, 100.0]);
        assert_eq!(pretrain_loss(&y, &inflow_only, 1.0).unwrap(), 1.0);
        assert_eq!(pretrain_loss(&y, &y, 0.5).unwrap(), 0.0);

        let y2 = t(vec![2.0, 4.0, 2.0, 4.0]);
        let yh2 = t(vec![3.0, 3.0, 3.0, 3.0]);
        let single = pretrain_loss(&y, &yh, 0.5).unwrap();
        assert_eq!(
            weighted_loss(&y2, &yh2, &[2.0, 0.0], 0.5).unwrap(),
            2.0 * single
        );
        assert_eq!(
            weighted_loss(&y2, &yh2, &[1.0, 1.0], 0.5).unwrap(),
            pretrain_loss(&y2, &yh2, 0.5).unwrap()
        );
        let base = weighted_loss(&y2, &yh2, &[0.3, 0.9], 0.5).unwrap();
        assert_eq!(
            weighted_loss(&y2, &yh2, &[0.6, 1.8], 0.5).unwrap(),
            2.0 * base
        );
        assert!(weighted_loss(&y2, &yh2, &[1.0], 0.5).is_err());
    }
}
