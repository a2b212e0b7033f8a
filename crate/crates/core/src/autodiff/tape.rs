//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the nodes that
//! depend on a trainable leaf.

use std::sync::Arc;

use super::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Mask {
        x: Var,
        mask: Tensor<S>,
    },
    Scale {
        x: Var,
        factor: S,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    TemporalUnfold {
        x: Var,
        kernel: usize,
    },
    NodeMix {
        x: Var,
        op: Arc<Tensor<S>>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<S>,
        rstd: Vec<S>,
    },
    SelectStep {
        x: Var,
        step: usize,
    },
    Sum(Var),
    /// Loss whose local Jacobian w.r.t. `x` is computed during the forward pass.
    Fused {
        x: Var,
        local_grad: Tensor<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Arguments of [`Tape::weighted_l1`].
pub struct WeightedL1<'a, S> {
    /// Targets in original units, same shape as the prediction `[B, ..., C]`.
    pub target: &'a Tensor<S>,
    /// One weight per leading-axis sample.
    pub sample_weights: &'a [S],
    /// One coefficient per channel (e.g. `λ`, `1 − λ`).
    pub channel_weights: &'a [S],
    /// Per-channel affine map from model space to original units.
    pub scale: &'a [S],
    pub offset: &'a [S],
    /// Divides the total (1 for a plain sum).
    pub normalizer: S,
}

#[derive(Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `[..., K] · [K, N]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let value = self.value(x).matmul(self.value(w));
        let ng = self.needs(x) || self.needs(w);
        self.push(value, Op::Linear { x, w }, ng)
    }

    /// Adds a `[C]` bias to every row of `[..., C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        let c = bias.numel();
        assert_eq!(self.value(x).last_dim(), c, "bias width mismatch");
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            row.iter_mut()
                .zip(bias.data())
                .for_each(|(v, &bv)| *v += bv);
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(value, Op::AddBias { x, b }, ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mask(&mut self, x: Var, mask: Tensor<S>) -> Var {
        assert_eq!(self.value(x).shape(), mask.shape());
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(mask.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(value, Op::Mask { x, mask }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(value, Op::Scale { x, factor }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let ng = self.needs(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(S::zero()));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Causal temporal window gather: `[B, T, M, C] → [B, T, M, k·C]`.
    ///
    /// Output slot `j` at step `t` holds the input at step `t − (k − 1) + j`,
    /// zero where that step precedes the window.
    pub fn temporal_unfold(&mut self, x: Var, kernel: usize) -> Var {
        let input = self.value(x);
        let &[b, t, m, c] = input.shape() else {
            panic!("temporal_unfold expects [B, T, M, C]");
        };
        let mut out = vec![S::zero(); b * t * m * kernel * c];
        let src = input.data();
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..kernel {
                    let Some(ts) = (ti + j).checked_sub(kernel - 1) else {
                        continue;
                    };
                    for mi in 0..m {
                        let s0 = ((bi * t + ts) * m + mi) * c;
                        let d0 = ((bi * t + ti) * m + mi) * kernel * c + j * c;
                        out[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t, m, kernel * c], out);
        let ng = self.needs(x);
        self.push(value, Op::TemporalUnfold { x, kernel }, ng)
    }

    /// Applies a fixed `M × M` operator along the node axis of `[..., M, C]`.
    pub fn node_mix(&mut self, x: Var, op: &Arc<Tensor<S>>) -> Var {
        let value = self.value(x).node_mix(op);
        let ng = self.needs(x);
        self.push(
            value,
            Op::NodeMix {
                x,
                op: Arc::clone(op),
            },
            ng,
        )
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]);
        let rows = first.rows();
        let lead = first.shape()[..first.shape().len() - 1].to_vec();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(shape, out), Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let input = self.value(x);
        let c = input.last_dim();
        assert!(start + len <= c);
        let rows = input.rows();
        let mut out = Vec::with_capacity(rows * len);
        for row in input.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.needs(x);
        self.push(Tensor::new(shape, out), Op::Slice { x, start }, ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let input = self.value(x);
        let c = input.last_dim();
        let n = S::lit(c as f64);
        let mut normalized = input.clone();
        let mut rstd = Vec::with_capacity(input.rows());
        for row in normalized.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let r = S::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = normalized.clone();
        for row in value.data_mut().chunks_mut(c) {
            for ((v, &gv), &bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            ng,
        )
    }

    /// `[B, T, M, C] → [B, M, C]` at step `step`.
    pub fn select_step(&mut self, x: Var, step: usize) -> Var {
        let input = self.value(x);
        let &[b, t, m, c] = input.shape() else {
            panic!("select_step expects [B, T, M, C]");
        };
        assert!(step < t);
        let block = m * c;
        let mut out = Vec::with_capacity(b * block);
        for bi in 0..b {
            let s0 = (bi * t + step) * block;
            out.extend_from_slice(&input.data()[s0..s0 + block]);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new(vec![b, m, c], out),
            Op::SelectStep { x, step },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Per-sample weighted, channel-balanced absolute error.
    ///
    /// `loss = (1/normalizer) Σ_b w_b · (1/P) Σ_p Σ_c κ_c |a_c·x + o_c − y|`
    /// where `P` counts positions between the sample and channel axes.
    pub fn weighted_l1(&mut self, x: Var, spec: WeightedL1<'_, S>) -> Var {
        let pred = self.value(x);
        assert_eq!(pred.shape(), spec.target.shape(), "prediction/target shape");
        let c = pred.last_dim();
        let batch = pred.shape()[0];
        assert_eq!(spec.sample_weights.len(), batch, "one weight per sample");
        assert!(spec.channel_weights.len() == c && spec.scale.len() == c && spec.offset.len() == c);
        let per_sample = pred.numel() / batch.max(1);
        let positions = S::lit((per_sample / c) as f64);
        let mut total = S::zero();
        let mut local = vec![S::zero(); pred.numel()];
        for (bi, &w) in spec.sample_weights.iter().enumerate() {
            let range = bi * per_sample..(bi + 1) * per_sample;
            let coef = w / (positions * spec.normalizer);
            for (idx, (&p, &y)) in pred.data()[range.clone()]
                .iter()
                .zip(&spec.target.data()[range.clone()])
                .enumerate()
            {
                let ch = idx % c;
                let diff = p * spec.scale[ch] + spec.offset[ch] - y;
                let k = coef * spec.channel_weights[ch];
                total += k * diff.abs();
                let sign = if diff > S::zero() {
                    S::one()
                } else if diff < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                };
                local[range.start + idx] = k * sign * spec.scale[ch];
            }
        }
        let local_grad = Tensor::new(pred.shape().to_vec(), local);
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::Fused { x, local_grad }, ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<S> {
        assert_eq!(
            self.value(output).numel(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), S::one()));

        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Linear { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, k, n) = (xv.rows(), xv.last_dim(), wv.shape()[1]);
                    if self.needs(*x) {
                        let mut gx = vec![S::zero(); rows * k];
                        S::gemm(
                            rows,
                            n,
                            k,
                            gy.data(),
                            false,
                            wv.data(),
                            true,
                            &mut gx,
                            false,
                        );
                        self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                    }
                    if self.needs(*w) {
                        let mut gw = vec![S::zero(); k * n];
                        S::gemm(
                            k,
                            rows,
                            n,
                            xv.data(),
                            true,
                            gy.data(),
                            false,
                            &mut gw,
                            false,
                        );
                        self.accumulate(&mut grads, *w, Tensor::new(vec![k, n], gw));
                    }
                }
                Op::AddBias { x, b } => {
                    if self.needs(*b) {
                        let c = gy.last_dim();
                        let mut gb = vec![S::zero(); c];
                        for row in gy.data().chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(&mut grads, *b, Tensor::new(shape, gb));
                    }
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, gy);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, gy.clone());
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, gy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, gy.map(|v| -v));
                    }
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, gy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let g = elementwise(&gy, self.value(*b), |g, o| g * o);
                        self.accumulate(&mut grads, *a, g);
                    }
                    if self.needs(*b) {
                        let g = elementwise(&gy, self.value(*a), |g, o| g * o);
                        self.accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mask { x, mask } => {
                    self.accumulate(&mut grads, *x, elementwise(&gy, mask, |g, m| g * m));
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    self.accumulate(&mut grads, *x, gy.map(|g| g * f));
                }
                Op::Sigmoid(x) => {
                    let g = elementwise(&gy, &node.value, |g, y| g * y * (S::one() - y));
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let g = elementwise(&gy, &node.value, |g, y| g * (S::one() - y * y));
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let g =
                        elementwise(
                            &gy,
                            &node.value,
                            |g, y| {
                                if y > S::zero() {
                                    g
                                } else {
                                    S::zero()
                                }
                            },
                        );
                    self.accumulate(&mut grads, *x, g);
                }
                Op::TemporalUnfold { x, kernel } => {
                    let shape = self.value(*x).shape().to_vec();
                    let [b, t, m, c] = shape[..] else {
                        unreachable!()
                    };
                    let k = *kernel;
                    let mut gx = vec![S::zero(); b * t * m * c];
                    let g = gy.data();
                    for bi in 0..b {
                        for ti in 0..t {
                            for j in 0..k {
                                let Some(ts) = (ti + j).checked_sub(k - 1) else {
                                    continue;
                                };
                                for mi in 0..m {
                                    let s0 = ((bi * t + ts) * m + mi) * c;
                                    let d0 = ((bi * t + ti) * m + mi) * k * c + j * c;
                                    for ci in 0..c {
                                        gx[s0 + ci] += g[d0 + ci];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(shape, gx));
                }
                Op::NodeMix { x, op } => {
                    let shape = gy.shape().to_vec();
                    let dims = shape.len();
                    let (m, c) = (shape[dims - 2], shape[dims - 1]);
                    let block = m * c;
                    let mut gx = vec![S::zero(); gy.numel()];
                    if block > 0 {
                        for (src, dst) in gy.data().chunks(block).zip(gx.chunks_mut(block)) {
                            S::gemm(m, m, c, op.data(), true, src, false, dst, false);
                        }
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(shape, gx));
                }
                Op::Concat(parts) => {
                    let total = gy.last_dim();
                    let rows = gy.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.last_dim();
                        if self.needs(p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(
                                    &gy.data()[r * total + offset..r * total + offset + w],
                                );
                            }
                            self.accumulate(&mut grads, p, Tensor::new(pv.shape().to_vec(), gp));
                        }
                        offset += w;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let w = gy.last_dim();
                    let mut gx = vec![S::zero(); xv.numel()];
                    for (dst, src) in gx.chunks_mut(c).zip(gy.data().chunks(w)) {
                        dst[*start..*start + w].copy_from_slice(src);
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    rstd,
                } => {
                    let c = gy.last_dim();
                    let gv = self.value(*gamma);
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut gg = vec![S::zero(); c];
                        let mut gb = vec![S::zero(); c];
                        for (grow, nrow) in gy.data().chunks(c).zip(normalized.data().chunks(c)) {
                            for j in 0..c {
                                gg[j] += grow[j] * nrow[j];
                                gb[j] += grow[j];
                            }
                        }
                        if self.needs(*gamma) {
                            self.accumulate(
                                &mut grads,
                                *gamma,
                                Tensor::new(gv.shape().to_vec(), gg),
                            );
                        }
                        if self.needs(*beta) {
                            let shape = self.value(*beta).shape().to_vec();
                            self.accumulate(&mut grads, *beta, Tensor::new(shape, gb));
                        }
                    }
                    if self.needs(*x) {
                        let n = S::lit(c as f64);
                        let mut gx = vec![S::zero(); gy.numel()];
                        for (((dst, grow), nrow), &r) in gx
                            .chunks_mut(c)
                            .zip(gy.data().chunks(c))
                            .zip(normalized.data().chunks(c))
                            .zip(rstd)
                        {
                            let mut mean_g = S::zero();
                            let mut mean_gn = S::zero();
                            for j in 0..c {
                                let gh = grow[j] * gv.data()[j];
                                mean_g += gh;
                                mean_gn += gh * nrow[j];
                            }
                            mean_g = mean_g / n;
                            mean_gn = mean_gn / n;
                            for j in 0..c {
                                let gh = grow[j] * gv.data()[j];
                                dst[j] = r * (gh - mean_g - nrow[j] * mean_gn);
                            }
                        }
                        let shape = self.value(*x).shape().to_vec();
                        self.accumulate(&mut grads, *x, Tensor::new(shape, gx));
                    }
                }
                Op::SelectStep { x, step } => {
                    let shape = self.value(*x).shape().to_vec();
                    let [b, t, m, c] = shape[..] else {
                        unreachable!()
                    };
                    let block = m * c;
                    let mut gx = vec![S::zero(); b * t * block];
                    for bi in 0..b {
                        let d0 = (bi * t + step) * block;
                        gx[d0..d0 + block]
                            .copy_from_slice(&gy.data()[bi * block..(bi + 1) * block]);
                    }
                    self.accumulate(&mut grads, *x, Tensor::new(shape, gx));
                }
                Op::Sum(x) => {
                    let g = gy.data()[0];
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::full(&shape, g));
                }
                Op::Fused { x, local_grad } => {
                    let g = gy.data()[0];
                    self.accumulate(&mut grads, *x, local_grad.map(|v| v * g));
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn elementwise<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Gradients of trainable leaves after a reverse sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}
