//! Density encoders mapping a standardized flow window to a latent density.

use super::config::ModelConfig;
use super::layers::Forward;
use super::state::{Init, ParamSpec};
use crate::autodiff::{Scalar, Var};

/// Maps `[B, T, M, 2]` standardized flows to a `[B, M, d]` density.
pub trait DensityEncoder {
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn encode<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var;
}

/// Stacked spatio-temporal blocks.
///
/// The inflow, outflow and their difference form three input channels that
/// are embedded to width `d`. Each block applies a gated temporal
/// convolution, a Chebyshev graph convolution with ReLU and a second gated
/// temporal convolution, adds the block input, layer-normalizes and applies
/// dropout. The last time step is the encoded density.
#[derive(Clone, Debug, PartialEq)]
pub struct StBlocks {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub temporal_kernel: usize,
    pub chebyshev_order: usize,
}

impl StBlocks {
    pub fn from_config(config: &ModelConfig) -> Self {
        Self {
            embed_dim: config.embed_dim,
            n_blocks: config.n_st_blocks,
            temporal_kernel: config.temporal_kernel,
            chebyshev_order: config.chebyshev_order,
        }
    }
}

impl DensityEncoder for StBlocks {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let kt = self.temporal_kernel;
        let kc = self.chebyshev_order;
        let mut specs = vec![
            ParamSpec::new("encoder.embed.w", vec![3, d], Init::Xavier),
            ParamSpec::new("encoder.embed.b", vec![d], Init::Zeros),
        ];
        for l in 0..self.n_blocks {
            let p = format!("encoder.block{l}");
            specs.extend([
                ParamSpec::new(format!("{p}.t1.w"), vec![kt * d, 2 * d], Init::Xavier),
                ParamSpec::new(format!("{p}.t1.b"), vec![2 * d], Init::Zeros),
                ParamSpec::new(format!("{p}.cheb.w"), vec![kc * d, d], Init::Xavier),
                ParamSpec::new(format!("{p}.cheb.b"), vec![d], Init::Zeros),
                ParamSpec::new(format!("{p}.t2.w"), vec![kt * d, 2 * d], Init::Xavier),
                ParamSpec::new(format!("{p}.t2.b"), vec![2 * d], Init::Zeros),
                ParamSpec::new(format!("{p}.ln.gamma"), vec![d], Init::Ones),
                ParamSpec::new(format!("{p}.ln.beta"), vec![d], Init::Zeros),
            ]);
        }
        specs
    }

    fn encode<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let t = f.value(x).shape()[1];
        let s = f.tape.slice_last(x, 0, 1);
        let r = f.tape.slice_last(x, 1, 1);
        let diff = f.tape.sub(s, r);
        let features = f.tape.concat(&[x, diff]);
        let mut h = f.dense(features, "encoder.embed.w", Some("encoder.embed.b"));
        for l in 0..self.n_blocks {
            let p = format!("encoder.block{l}");
            let a = f.gated_temporal(
                h,
                self.temporal_kernel,
                &format!("{p}.t1.w"),
                &format!("{p}.t1.b"),
            );
            let g = f.chebyshev(a, &format!("{p}.cheb.w"), Some(&format!("{p}.cheb.b")));
            let g = f.tape.relu(g);
            let c = f.gated_temporal(
                g,
                self.temporal_kernel,
                &format!("{p}.t2.w"),
                &format!("{p}.t2.b"),
            );
            let res = f.tape.add(c, h);
            let (gamma, beta) = (
                f.param(&format!("{p}.ln.gamma")),
                f.param(&format!("{p}.ln.beta")),
            );
            let normed = f.tape.layer_norm(res, gamma, beta, S::lit(1e-5));
            h = f.dropout(normed);
        }
        f.tape.select_step(h, t - 1)
    }
}
