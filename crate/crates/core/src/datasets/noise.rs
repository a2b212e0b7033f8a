//! Gaussian replacement of training samples in standardized space.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, FlowSample, Standardizer, CHANNELS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    InputsAndTargets,
    InputsOnly,
}

/// Parameters of the replacement noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the draws in standardized units.
    pub sigma: f64,
    pub target: NoiseTarget,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            target: NoiseTarget::InputsAndTargets,
        }
    }
}

fn replace<R: Rng>(values: &mut [f32], standardizer: &Standardizer, sigma: f64, rng: &mut R) {
    for (idx, v) in values.iter_mut().enumerate() {
        let z: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
        *v = standardizer.inverse(z, idx % CHANNELS) as f32;
    }
}

pub(crate) fn corrupt_sample<R: Rng>(
    sample: &mut FlowSample,
    standardizer: &Standardizer,
    target: NoiseTarget,
    rng: &mut R,
) {
    corrupt_with(sample, standardizer, &NoiseSpec { sigma: 1.0, target }, rng);
}

fn corrupt_with<R: Rng>(
    sample: &mut FlowSample,
    standardizer: &Standardizer,
    spec: &NoiseSpec,
    rng: &mut R,
) {
    replace(sample.x.data_mut(), standardizer, spec.sigma, rng);
    if spec.target == NoiseTarget::InputsAndTargets {
        replace(sample.y.data_mut(), standardizer, spec.sigma, rng);
    }
    sample.corrupted = true;
}

/// Replaces `floor(level · |train|)` seeded training samples with unit Gaussian draws.
pub fn inject_noise(bundle: &DatasetBundle, level: f64, seed: u64) -> Result<DatasetBundle> {
    inject_noise_with(bundle, level, seed, &NoiseSpec::default())
}

pub fn inject_noise_with(
    bundle: &DatasetBundle,
    level: f64,
    seed: u64,
    spec: &NoiseSpec,
) -> Result<DatasetBundle> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::config(format!("noise level {level} outside (0, 1]")));
    }
    if !(spec.sigma.is_finite() && spec.sigma > 0.0) {
        return Err(Error::config(format!(
            "noise sigma {} must be positive",
            spec.sigma
        )));
    }
    let mut out = bundle.clone();
    let count = (level * out.train.len() as f64 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..out.train.len()).collect();
    order.shuffle(&mut rng);
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    for idx in chosen {
        corrupt_with(&mut out.train[idx], &bundle.standardizer, spec, &mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticConfig};

    fn bundle(n_steps: usize) -> DatasetBundle {
        generate_synthetic(&SyntheticConfig {
            n_steps,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn exact_count() {
        let mut b = bundle(400);
        b.train.truncate(100);
        let noisy = inject_noise(&b, 0.5, 1).unwrap();
        assert_eq!(noisy.corrupted_train_ids().len(), 50);
        assert_eq!(noisy.val, b.val);
        assert_eq!(noisy.test, b.test);
    }

    #[test]
    fn deterministic_and_idempotent() {
        let b = bundle(400);
        let one = inject_noise(&b, 0.1, 9).unwrap();
        let two = inject_noise(&b, 0.1, 9).unwrap();
        assert_eq!(one.corrupted_train_ids(), two.corrupted_train_ids());
        let again = inject_noise(&one, 0.1, 9).unwrap();
        assert_eq!(again.corrupted_train_ids(), one.corrupted_train_ids());
        assert_eq!(again.train, one.train);
    }

    #[test]
    fn replaced_entries_are_standard_normal() {
        let b = bundle(400);
        let noisy = inject_noise(&b, 1.0, 2).unwrap();
        let st = &b.standardizer;
        let mut vals = Vec::new();
        for s in noisy.train.iter().filter(|s| s.corrupted) {
            for (i, &v) in s.x.data().iter().chain(s.y.data()).enumerate() {
                vals.push(st.transform(v as f64, i % CHANNELS));
            }
            if vals.len() >= 10_000 {
                break;
            }
        }
        vals.truncate(10_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn inputs_only_keeps_targets() {
        let b = bundle(400);
        let spec = NoiseSpec {
            target: NoiseTarget::InputsOnly,
            ..Default::default()
        };
        let noisy = inject_noise_with(&b, 0.3, 4, &spec).unwrap();
        for (clean, dirty) in b.train.iter().zip(&noisy.train) {
            assert_eq!(clean.y, dirty.y);
            if dirty.corrupted {
                assert_ne!(clean.x, dirty.x);
            }
        }
    }

    #[test]
    fn level_out_of_range_rejected() {
        let b = bundle(400);
        assert!(inject_noise(&b, 0.0, 1).is_err());
        assert!(inject_noise(&b, 1.2, 1).is_err());
    }
}
