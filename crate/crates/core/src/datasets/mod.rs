//! Urban flow samples and the bundles that group them into splits.
//!
//! Samples are stored in original flow units; models consume the
//! standardized view produced by [`Standardizer`].

mod convert;
mod io;
mod noise;
mod standardize;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::grid_graph::UrbanGraph;

pub use convert::{convert_dump, DumpLayout, KNOWN_DUMPS};
pub use io::{
    load_bundle, load_bundle_with_graph, read_corrupted_ids, write_bundle, Manifest, TensorEntry,
    CORRUPTED_IDS_FILE, MANIFEST_FILE,
};
pub use noise::{inject_noise, inject_noise_with, NoiseSpec, NoiseTarget};
pub use standardize::Standardizer;
pub use synthetic::{
    conservation_residual, generate_synthetic, generate_synthetic_with_timeline, simulate,
    SyntheticConfig, Timeline,
};

/// Channel 0 is inflow `s`, channel 1 is outflow `r`.
pub const CHANNELS: usize = 2;

/// One supervised example: an input window and the next-step target.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub id: u64,
    /// `[T_in, M, 2]` in flow units.
    pub x: Tensor<f32>,
    /// `[M, 2]` in flow units.
    pub y: Tensor<f32>,
    pub corrupted: bool,
}

impl FlowSample {
    pub fn input_len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.y.shape()[0]
    }

    /// Last observed step of the window, `[M, 2]`.
    pub fn last_step(&self) -> &[f32] {
        let block = self.num_nodes() * CHANNELS;
        let t = self.input_len();
        &self.x.data()[(t - 1) * block..t * block]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PublicDump,
    Synthetic,
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub name: String,
    pub train: Vec<FlowSample>,
    pub val: Vec<FlowSample>,
    pub test: Vec<FlowSample>,
    pub standardizer: Standardizer,
    pub graph: UrbanGraph,
    pub provenance: Provenance,
    pub interval_minutes: u32,
}

impl DatasetBundle {
    pub fn input_len(&self) -> usize {
        self.train
            .first()
            .or(self.val.first())
            .or(self.test.first())
            .map(FlowSample::input_len)
            .unwrap_or(0)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &FlowSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn corrupted_train_ids(&self) -> Vec<u64> {
        self.train
            .iter()
            .filter(|s| s.corrupted)
            .map(|s| s.id)
            .collect()
    }

    /// Checks shapes, finiteness and id uniqueness across splits.
    pub fn validate(&self) -> Result<()> {
        let m = self.num_nodes();
        let t = self.input_len();
        if t == 0 {
            return Err(Error::dataset("bundle has no samples"));
        }
        let mut ids = std::collections::HashSet::new();
        for s in self.all_samples() {
            if s.x.shape() != [t, m, CHANNELS] || s.y.shape() != [m, CHANNELS] {
                return Err(Error::dataset(format!(
                    "sample {} has shapes {:?}/{:?}, expected [{t}, {m}, 2]/[{m}, 2]",
                    s.id,
                    s.x.shape(),
                    s.y.shape()
                )));
            }
            if !s.x.is_finite() || !s.y.is_finite() {
                return Err(Error::NonFinite(format!("sample {}", s.id)));
            }
            if !ids.insert(s.id) {
                return Err(Error::dataset(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}

/// Standardized `[B, T, M, 2]` model input for a batch of samples.
pub fn batch_inputs<S: Scalar>(samples: &[&FlowSample], standardizer: &Standardizer) -> Tensor<S> {
    let first = samples.first().expect("non-empty batch");
    let (t, m) = (first.input_len(), first.num_nodes());
    let mut data = Vec::with_capacity(samples.len() * t * m * CHANNELS);
    for s in samples {
        for (idx, &v) in s.x.data().iter().enumerate() {
            data.push(S::lit(standardizer.transform(v as f64, idx % CHANNELS)));
        }
    }
    Tensor::new(vec![samples.len(), t, m, CHANNELS], data)
}

/// Raw `[B, M, 2]` targets for a batch of samples.
pub fn batch_targets<S: Scalar>(samples: &[&FlowSample]) -> Tensor<S> {
    let m = samples[0].num_nodes();
    let data = samples
        .iter()
        .flat_map(|s| s.y.data().iter().map(|&v| S::lit(v as f64)))
        .collect();
    Tensor::new(vec![samples.len(), m, CHANNELS], data)
}

/// Splits `n` chronologically ordered items 7:1:2, returning `(train, val)` sizes.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let train = (n as f64 * 0.7).round() as usize;
    let val = (n as f64 * 0.1).round() as usize;
    (train.min(n), val.min(n - train.min(n)))
}
