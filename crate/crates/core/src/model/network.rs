//! The physics-guided network: encoder, physics update and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, ModelConfig, Variant};
use super::encoder::{DensityEncoder, StBlocks};
use super::layers::{laplacian_tensor, Dropout, Forward};
use super::state::ModelState;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid_graph::GraphOperator;

/// PN over an arbitrary density encoder.
#[derive(Clone, Debug)]
pub struct PhysicsNet<E = StBlocks> {
    pub config: ModelConfig,
    pub encoder: E,
}

impl PhysicsNet<StBlocks> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            config: config.clone(),
            encoder: StBlocks::from_config(config),
        }
    }
}

impl<E: DensityEncoder> PhysicsNet<E> {
    fn activate<S: Scalar>(&self, f: &mut Forward<'_, S>, v: Var) -> Var {
        match self.config.physics_activation {
            Activation::Relu => f.tape.relu(v),
            Activation::Identity => v,
        }
    }

    /// Flows `[B, M, 1]` pair → `σ(g_{w_s}(s)) − σ(g_{w_r}(r))`, shape `[B, M, d]`.
    pub fn flux<S: Scalar>(&self, f: &mut Forward<'_, S>, s: Var, r: Var) -> Var {
        let gs = f.chebyshev(s, "physics.w_s", None);
        let gr = f.chebyshev(r, "physics.w_r", None);
        let (gs, gr) = (self.activate(f, gs), self.activate(f, gr));
        f.tape.sub(gs, gr)
    }

    /// Inflow and outflow channels of window step `t`, each `[B, M, 1]`.
    fn flows_at<S: Scalar>(f: &mut Forward<'_, S>, x: Var, t: usize) -> (Var, Var) {
        let step = f.tape.select_step(x, t);
        (f.tape.slice_last(step, 0, 1), f.tape.slice_last(step, 1, 1))
    }

    /// `z + σ(g_{w_s}(s_T)) − σ(g_{w_r}(r_T))` with the last observed flows.
    pub fn discrete_update<S: Scalar>(&self, f: &mut Forward<'_, S>, z: Var, x: Var) -> Var {
        let t = f.value(x).shape()[1];
        let (s, r) = Self::flows_at(f, x, t - 1);
        let dz = self.flux(f, s, r);
        f.tape.add(z, dz)
    }

    /// Integrates `dz/dt = flux(s_t, r_t)` over the unit intervals
    /// `[t, t + 1]`, `t = 1..=T`, holding the flows of step `t` on each.
    pub fn continuous_update<S: Scalar>(&self, f: &mut Forward<'_, S>, z0: Var, x: Var) -> Var {
        let t = f.value(x).shape()[1];
        let mut z = z0;
        for step in 0..t {
            let (s, r) = Self::flows_at(f, x, step);
            let rate = self.flux(f, s, r);
            z = rk4(
                f,
                z,
                step as f64,
                1.0,
                self.config.integrator_steps,
                |_, _, _| rate,
            );
        }
        z
    }

    /// Per-node MLP `[B, M, d] → [B, M, 2]` with a tanh hidden layer.
    pub fn decode<S: Scalar>(&self, f: &mut Forward<'_, S>, z: Var) -> Var {
        let h = f.dense(z, "decoder.w1", Some("decoder.b1"));
        let h = f.tape.tanh(h);
        let h = f.dropout(h);
        f.dense(h, "decoder.w2", Some("decoder.b2"))
    }

    pub fn encode<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        self.encoder.encode(f, x)
    }

    /// Standardized `[B, T, M, 2]` window → standardized `[B, M, 2]` prediction.
    pub fn forward<S: Scalar>(&self, f: &mut Forward<'_, S>, x: Var) -> Var {
        let z = self.encode(f, x);
        let z_next = match self.config.variant {
            Variant::PnDis => self.discrete_update(f, z, x),
            Variant::PnCon => self.continuous_update(f, z, x),
        };
        self.decode(f, z_next)
    }
}

/// Classic fixed-step fourth-order Runge–Kutta over `[t0, t0 + span]`.
pub fn rk4<S: Scalar>(
    f: &mut Forward<'_, S>,
    z0: Var,
    t0: f64,
    span: f64,
    steps: usize,
    mut rhs: impl FnMut(&mut Forward<'_, S>, Var, f64) -> Var,
) -> Var {
    let h = span / steps as f64;
    let mut z = z0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = rhs(f, z, t);
        let half1 = f.tape.scale(k1, S::lit(h / 2.0));
        let z2 = f.tape.add(z, half1);
        let k2 = rhs(f, z2, t + h / 2.0);
        let half2 = f.tape.scale(k2, S::lit(h / 2.0));
        let z3 = f.tape.add(z, half2);
        let k3 = rhs(f, z3, t + h / 2.0);
        let full3 = f.tape.scale(k3, S::lit(h));
        let z4 = f.tape.add(z, full3);
        let k4 = rhs(f, z4, t + h);
        let k23 = f.tape.add(k2, k3);
        let k23 = f.tape.scale(k23, S::lit(2.0));
        let k14 = f.tape.add(k1, k4);
        let sum = f.tape.add(k14, k23);
        let incr = f.tape.scale(sum, S::lit(h / 6.0));
        z = f.tape.add(z, incr);
    }
    z
}

fn check_input(state: &ModelState, x: &Tensor<f32>) -> Result<()> {
    match x.shape() {
        [_, t, m, 2] if *t == state.input_len && *m == state.num_nodes => Ok(()),
        other => Err(Error::config(format!(
            "input shape {other:?} does not match [B, {}, {}, 2]",
            state.input_len, state.num_nodes
        ))),
    }
}

impl ModelState {
    pub fn network(&self) -> PhysicsNet {
        PhysicsNet::new(&self.config)
    }

    fn run(&self, op: &GraphOperator, x: &Tensor<f32>, dropout: Dropout) -> Result<Tensor<f32>> {
        check_input(self, x)?;
        if op.num_nodes() != self.num_nodes {
            return Err(Error::Graph(format!(
                "graph has {} nodes, model expects {}",
                op.num_nodes(),
                self.num_nodes
            )));
        }
        let mut tape = Tape::new();
        let params = &self.params;
        let mut f = Forward::new(
            &mut tape,
            params,
            false,
            laplacian_tensor(op),
            self.config.chebyshev_order,
            self.config.dropout_rate,
            dropout,
        );
        let xv = f.tape.constant(x.clone());
        let out = self.network().forward(&mut f, xv);
        let y = tape.value(out).clone();
        if !y.is_finite() {
            return Err(Error::NonFinite("model prediction".into()));
        }
        Ok(y)
    }

    /// Deterministic prediction with dropout disabled.
    pub fn predict(&self, op: &GraphOperator, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.run(op, x, Dropout::Off)
    }

    /// `k` stochastic passes with dropout active; pass `i` draws its masks from
    /// stream `i` of a generator seeded with `seed`.
    pub fn forward_mc(
        &self,
        op: &GraphOperator,
        x: &Tensor<f32>,
        k: usize,
        seed: u64,
    ) -> Result<Vec<Tensor<f32>>> {
        if k < 2 {
            return Err(Error::config(format!(
                "MC dropout needs at least 2 passes, got {k}"
            )));
        }
        (0..k)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.run(op, x, Dropout::Active(rng))
            })
            .collect()
    }
}
