use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_graph::LambdaMax;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One residual physics update from the encoded density.
    #[default]
    PnDis,
    /// Fixed-step RK4 integration of the density over the input window.
    PnCon,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pn_dis" => Ok(Self::PnDis),
            "pn_con" => Ok(Self::PnCon),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Activation wrapped around each graph flux term of the physics update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Linear flux terms, used to compare against dense closed forms.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_st_blocks: usize,
    pub chebyshev_order: usize,
    pub temporal_kernel: usize,
    pub dropout_rate: f64,
    pub variant: Variant,
    /// RK4 steps per unit interval (PN-con only).
    pub integrator_steps: usize,
    pub physics_activation: Activation,
    pub lambda_max: LambdaMax,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_st_blocks: 2,
            chebyshev_order: 3,
            temporal_kernel: 3,
            dropout_rate: 0.1,
            variant: Variant::PnDis,
            integrator_steps: 1,
            physics_activation: Activation::Relu,
            lambda_max: LambdaMax::Bound,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.chebyshev_order == 0 || self.temporal_kernel == 0 {
            return Err(Error::config(
                "chebyshev_order and temporal_kernel must be at least 1",
            ));
        }
        if self.integrator_steps == 0 {
            return Err(Error::config("integrator_steps must be at least 1"));
        }
        Ok(())
    }

    /// Checks the configuration against an input window length.
    pub fn validate_for(&self, input_len: usize) -> Result<()> {
        self.validate()?;
        if input_len < self.temporal_kernel {
            return Err(Error::config(format!(
                "input window of {input_len} steps is shorter than the temporal kernel ({})",
                self.temporal_kernel
            )));
        }
        Ok(())
    }
}
