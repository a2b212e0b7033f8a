//! Building blocks evaluated on a [`Tape`]: Chebyshev graph convolution,
//! gated temporal convolution and dropout.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::state::Params;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::grid_graph::GraphOperator;

/// Rescaled Laplacian in the tape's precision.
pub fn laplacian_tensor<S: Scalar>(op: &GraphOperator) -> Arc<Tensor<S>> {
    Arc::new(op.scaled_laplacian().cast())
}

/// Whether dropout masks are sampled during a forward pass.
pub enum Dropout {
    Off,
    /// Inverted dropout with masks drawn from the owned stream.
    Active(ChaCha8Rng),
}

/// Tape plus bound parameters and graph operator for one forward pass.
pub struct Forward<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    vars: HashMap<String, Var>,
    laplacian: Arc<Tensor<S>>,
    chebyshev_order: usize,
    dropout_rate: f64,
    dropout: Dropout,
}

impl<'t, S: Scalar> Forward<'t, S> {
    /// Places every parameter on the tape, as trainable leaves when `trainable`.
    pub fn new(
        tape: &'t mut Tape<S>,
        params: &Params<S>,
        trainable: bool,
        laplacian: Arc<Tensor<S>>,
        chebyshev_order: usize,
        dropout_rate: f64,
        dropout: Dropout,
    ) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self {
            tape,
            vars,
            laplacian,
            chebyshev_order,
            dropout_rate,
            dropout,
        }
    }

    /// Tape handle of a bound parameter.
    pub fn param(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.tape.value(v)
    }

    /// `x · W + b` over the last axis.
    pub fn dense(&mut self, x: Var, w: &str, b: Option<&str>) -> Var {
        let wv = self.param(w);
        let y = self.tape.linear(x, wv);
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.tape.add_bias(y, bv)
            }
            None => y,
        }
    }

    /// `Σ_k T_k(L̃) x W_k` for `x` of shape `[..., M, C]` and `W` of shape `[K·C, C_out]`.
    pub fn chebyshev(&mut self, x: Var, w: &str, b: Option<&str>) -> Var {
        let k = self.chebyshev_order;
        let mut terms = vec![x];
        if k > 1 {
            terms.push(self.tape.node_mix(x, &self.laplacian));
        }
        for i in 2..k {
            let mixed = self.tape.node_mix(terms[i - 1], &self.laplacian);
            let doubled = self.tape.scale(mixed, S::lit(2.0));
            terms.push(self.tape.sub(doubled, terms[i - 2]));
        }
        let stacked = if terms.len() == 1 {
            x
        } else {
            self.tape.concat(&terms)
        };
        self.dense(stacked, w, b)
    }

    /// Causal gated temporal convolution on `[B, T, M, d]` with a residual
    /// inside the gate: `(P + x) ⊙ σ(Q)` where `[P, Q] = conv(x)`.
    pub fn gated_temporal(&mut self, x: Var, kernel: usize, w: &str, b: &str) -> Var {
        let d = self.value(x).last_dim();
        let window = self.tape.temporal_unfold(x, kernel);
        let pq = self.dense(window, w, Some(b));
        let p = self.tape.slice_last(pq, 0, d);
        let q = self.tape.slice_last(pq, d, d);
        let lin = self.tape.add(p, x);
        let gate = self.tape.sigmoid(q);
        self.tape.mul(lin, gate)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let rate = self.dropout_rate;
        let Dropout::Active(rng) = &mut self.dropout else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let shape = self.tape.value(x).shape().to_vec();
        let numel: usize = shape.iter().product();
        let mask = (0..numel)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.tape.mask(x, Tensor::new(shape, mask))
    }
}
