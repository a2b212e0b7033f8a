use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::model::Params;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left unchanged.
    pub fn update(&mut self, params: &mut Params<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = Params::new();
        params.insert("w".into(), Tensor::new(vec![2], vec![1.0f32, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], vec![0.5f32, -3.0]));
        let mut adam = Adam::new(0.1);
        adam.update(&mut params, &grads);
        // bias-corrected first step is lr · sign(g)
        let w = params["w"].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = Params::new();
        params.insert("w".into(), Tensor::new(vec![1], vec![5.0f32]));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let w = params["w"].data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::new(vec![1], vec![2.0 * (w - 2.0)]));
            adam.update(&mut params, &grads);
        }
        assert!((params["w"].data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new(vec![2], vec![3.0f32, 4.0]));
        grads.insert("b".to_string(), Tensor::new(vec![1], vec![12.0f32]));
        let before = clip_global_norm(&mut grads, 5.0);
        assert!((before - 13.0).abs() < 1e-9);
        let after: f64 = grads
            .values()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((after - 5.0).abs() < 1e-5);
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), Tensor::new(vec![1], vec![1.0f32]));
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small["a"].data(), [1.0]);
    }
}
