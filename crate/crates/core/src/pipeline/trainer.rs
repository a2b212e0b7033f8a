//! Mini-batch training with early stopping on validation MAE.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, Adam};
use super::TrainConfig;
use crate::autodiff::{Tape, Tensor, WeightedL1};
use crate::datasets::{batch_inputs, batch_targets, FlowSample, Standardizer, CHANNELS};
use crate::error::{Error, Result};
use crate::grid_graph::GraphOperator;
use crate::model::{laplacian_tensor, Dropout, Forward, ModelState};
use crate::seeding::derive_seed;

/// Graph operator and standardizer shared by every phase of a run.
pub struct TrainContext<'a> {
    pub op: &'a GraphOperator,
    pub standardizer: &'a Standardizer,
    laplacian: Arc<Tensor<f32>>,
}

impl<'a> TrainContext<'a> {
    pub fn new(op: &'a GraphOperator, standardizer: &'a Standardizer) -> Self {
        Self {
            op,
            standardizer,
            laplacian: laplacian_tensor(op),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub state: ModelState,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<EpochStats>,
}

/// Dropout-free predictions for `samples`, destandardized to `[N, M, 2]`.
pub fn predict_samples(
    state: &ModelState,
    samples: &[&FlowSample],
    ctx: &TrainContext<'_>,
    batch: usize,
) -> Result<Tensor<f64>> {
    let m = state.num_nodes;
    let mut data = Vec::with_capacity(samples.len() * m * CHANNELS);
    for chunk in samples.chunks(batch.max(1)) {
        let x = batch_inputs::<f32>(chunk, ctx.standardizer);
        let y = state.predict(ctx.op, &x)?;
        data.extend(ctx.standardizer.destandardize(&y.cast::<f64>()).into_data());
    }
    Ok(Tensor::new(vec![samples.len(), m, CHANNELS], data))
}

/// Mean of the inflow and outflow MAE in flow units.
pub fn validation_mae(
    state: &ModelState,
    samples: &[&FlowSample],
    ctx: &TrainContext<'_>,
    batch: usize,
) -> Result<f64> {
    let pred = predict_samples(state, samples, ctx, batch)?;
    let mut err = [0.0f64; CHANNELS];
    let targets = samples.iter().flat_map(|s| s.y.data().iter());
    for (i, (&p, &y)) in pred.data().iter().zip(targets).enumerate() {
        err[i % CHANNELS] += (p - y as f64).abs();
    }
    let n = (pred.numel() / CHANNELS) as f64;
    Ok((err[0] + err[1]) / (2.0 * n))
}

/// Owns a model and its optimizer state for one training phase.
pub struct Trainer<'a> {
    pub state: ModelState,
    pub adam: Adam,
    ctx: &'a TrainContext<'a>,
    cfg: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(state: ModelState, ctx: &'a TrainContext<'a>, cfg: &'a TrainConfig) -> Self {
        Self {
            state,
            adam: Adam::new(cfg.learning_rate),
            ctx,
            cfg,
        }
    }

    /// One optimizer step on `batch`; returns the objective before the update.
    ///
    /// The objective is the weighted per-sample L1 divided by the batch's total
    /// weight, so uniform weights reduce to the unweighted batch mean.
    pub fn step(
        &mut self,
        batch: &[&FlowSample],
        weights: Option<&[f32]>,
        dropout: Dropout,
    ) -> Result<f64> {
        let ones;
        let weights = match weights {
            Some(w) => w,
            None => {
                ones = vec![1.0f32; batch.len()];
                &ones
            }
        };
        let total: f32 = weights.iter().sum();
        let x = batch_inputs::<f32>(batch, self.ctx.standardizer);
        let y = batch_targets::<f32>(batch);
        let lambda = self.cfg.lambda_balance as f32;
        let mut tape = Tape::new();
        let mut f = Forward::new(
            &mut tape,
            &self.state.params,
            true,
            Arc::clone(&self.ctx.laplacian),
            self.state.config.chebyshev_order,
            self.state.config.dropout_rate,
            dropout,
        );
        let xv = f.tape.constant(x);
        let out = self.state.network().forward(&mut f, xv);
        let bound = f.bound().clone();
        let loss = tape.weighted_l1(
            out,
            WeightedL1 {
                target: &y,
                sample_weights: weights,
                channel_weights: &[lambda, 1.0 - lambda],
                scale: &self.ctx.standardizer.scale::<f32>(),
                offset: &self.ctx.standardizer.offset::<f32>(),
                normalizer: total,
            },
        );
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss (lr {}, batch of {} starting at sample {})",
                self.cfg.learning_rate,
                batch.len(),
                batch[0].id
            )));
        }
        let mut grads = tape.backward(loss);
        let mut named = BTreeMap::new();
        for (name, var) in bound {
            if let Some(g) = grads.take(var) {
                named.insert(name, g);
            }
        }
        clip_global_norm(&mut named, self.cfg.grad_clip);
        self.adam.update(&mut self.state.params, &named);
        Ok(value)
    }

    /// Epoch loop with early stopping; returns the best-validation parameters.
    pub fn fit(
        mut self,
        train: &[&FlowSample],
        weights: Option<&HashMap<u64, f64>>,
        val: &[&FlowSample],
        patience: usize,
        seed: u64,
    ) -> Result<TrainOutcome> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Pipeline(
                "training and validation sets must be non-empty".into(),
            ));
        }
        let sample_weight = |s: &FlowSample| -> Result<f32> {
            match weights {
                None => Ok(1.0),
                Some(w) => w
                    .get(&s.id)
                    .map(|&v| v as f32)
                    .ok_or_else(|| Error::Pipeline(format!("no weight for sample {}", s.id))),
            }
        };
        let all_weights = train
            .iter()
            .map(|s| sample_weight(s))
            .collect::<Result<Vec<f32>>>()?;

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
        let mut best = (self.state.clone(), 0usize, f64::INFINITY);
        let mut history = Vec::new();
        let mut since_best = 0;
        for epoch in 1..=self.cfg.max_epochs {
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for (bi, idx) in order.chunks(self.cfg.batch_size).enumerate() {
                let batch: Vec<&FlowSample> = idx.iter().map(|&i| train[i]).collect();
                let w: Vec<f32> = idx.iter().map(|&i| all_weights[i]).collect();
                let rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, epoch as u64, bi as u64]));
                let use_weights = weights.is_some().then_some(w.as_slice());
                loss_sum += self.step(&batch, use_weights, Dropout::Active(rng))?;
                batches += 1;
            }
            let val_mae = validation_mae(&self.state, val, self.ctx, self.cfg.eval_batch)?;
            history.push(EpochStats {
                epoch,
                train_loss: loss_sum / batches as f64,
                val_mae,
            });
            log::debug!(
                "epoch {epoch}: train {:.4} val {val_mae:.4}",
                loss_sum / batches as f64
            );
            if val_mae < best.2 {
                best = (self.state.clone(), epoch, val_mae);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
        Ok(TrainOutcome {
            state: best.0,
            best_epoch: best.1,
            best_val_mae: best.2,
            history,
        })
    }
}
