use serde::{Deserialize, Serialize};

use super::{FlowSample, CHANNELS};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-channel z-score map fit on training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Standardizer {
    pub fn new(mean: [f64; CHANNELS], std: [f64; CHANNELS]) -> Result<Self> {
        for (c, &s) in std.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::dataset(format!(
                    "channel {c} has standard deviation {s}; constant channels cannot be standardized"
                )));
            }
        }
        Ok(Self { mean, std })
    }

    /// Population mean/std of every input entry per channel.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a FlowSample>) -> Result<Self> {
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let mut count = 0usize;
        for s in samples {
            for pair in s.x.data().chunks(CHANNELS) {
                for c in 0..CHANNELS {
                    let v = pair[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::dataset("cannot fit a standardizer on zero samples"));
        }
        let n = count as f64;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        Self::new(mean, std)
    }

    pub fn transform(&self, v: f64, channel: usize) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn inverse(&self, v: f64, channel: usize) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }

    /// Maps a `[..., 2]` tensor from standardized space back to flow units.
    pub fn destandardize<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        assert_eq!(t.last_dim(), CHANNELS);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| S::lit(self.inverse(v.as_f64(), i % CHANNELS)))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    pub fn standardize<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        assert_eq!(t.last_dim(), CHANNELS);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| S::lit(self.transform(v.as_f64(), i % CHANNELS)))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    pub fn scale<S: Scalar>(&self) -> [S; CHANNELS] {
        [S::lit(self.std[0]), S::lit(self.std[1])]
    }

    pub fn offset<S: Scalar>(&self) -> [S; CHANNELS] {
        [S::lit(self.mean[0]), S::lit(self.mean[1])]
    }
}
