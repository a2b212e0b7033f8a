use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::encoder::{DensityEncoder, StBlocks};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over the first and last axes.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Named parameter tensors in a stable (sorted) order.
pub type Params<S> = BTreeMap<String, Tensor<S>>;

/// Every parameter of a PN with the reference encoder.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.embed_dim;
    let k = config.chebyshev_order;
    let mut specs = StBlocks::from_config(config).param_specs();
    specs.extend([
        ParamSpec::new("physics.w_s", vec![k, d], Init::Xavier),
        ParamSpec::new("physics.w_r", vec![k, d], Init::Xavier),
        ParamSpec::new("decoder.w1", vec![d, d], Init::Xavier),
        ParamSpec::new("decoder.b1", vec![d], Init::Zeros),
        ParamSpec::new("decoder.w2", vec![d, 2], Init::Xavier),
        ParamSpec::new("decoder.b2", vec![2], Init::Zeros),
    ]);
    specs
}

pub fn init_params<S: Scalar>(specs: &[ParamSpec], seed: u64) -> Params<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![S::zero(); numel],
            Init::Ones => vec![S::one(); numel],
            Init::Xavier => {
                let fan_in = spec.shape[0] as f64;
                let fan_out = *spec.shape.last().unwrap() as f64;
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                (0..numel)
                    .map(|_| S::lit(rng.random_range(-limit..limit)))
                    .collect()
            }
        };
        params.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data));
    }
    params
}

/// Parameters and architecture of one PN instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub num_nodes: usize,
    pub input_len: usize,
    pub params: Params<f32>,
}

impl ModelState {
    /// Freshly initialized model for `num_nodes` regions and windows of `input_len` steps.
    pub fn new(config: ModelConfig, num_nodes: usize, input_len: usize, seed: u64) -> Result<Self> {
        config.validate_for(input_len)?;
        let params = init_params(&param_specs(&config), seed);
        Ok(Self {
            config,
            num_nodes,
            input_len,
            params,
        })
    }

    /// Verifies that parameter names and shapes match the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::config(format!(
                "model has {} parameters, configuration expects {}",
                self.params.len(),
                specs.len()
            )));
        }
        for spec in specs {
            match self.params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::config(format!("parameter {} missing", spec.name))),
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn params_as<S: Scalar>(&self) -> Params<S> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.cast()))
            .collect()
    }
}
