//! Physics-guided network (PN) for next-step urban flow prediction.
//!
//! An encoder maps a standardized window of inflow/outflow to a latent
//! potential density `z_T` on every region. The discrete variant advances it
//! by one residual graph update driven by the last observed flows,
//!
//! ```text
//! z_{T+1} = z_T + σ(g_{w_s}(A, s_T)) − σ(g_{w_r}(A, r_T))
//! ```
//!
//! where `g` is a Chebyshev graph convolution, and the continuous variant
//! integrates the same right-hand side with RK4. A per-node MLP decodes the
//! density into the next inflow/outflow.

mod checkpoint;
mod config;
mod encoder;
mod layers;
mod network;
mod state;


pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
};
pub use config::{Activation, ModelConfig, Variant};
pub use encoder::{DensityEncoder, StBlocks};
pub use layers::{laplacian_tensor, Dropout, Forward};
pub use network::{rk4, PhysicsNet};
pub use state::{init_params, param_specs, Init, ModelState, ParamSpec, Params};
