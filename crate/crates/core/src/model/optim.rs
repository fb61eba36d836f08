// SPDX-License-Identifier: MIT OR Apache-2.0

use super::params::Model;
use super::real::Real;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr`.
    pub fn update<F: Real>(&mut self, model: &mut Model<F>, grads: &Model<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in model
            .data
            .iter_mut()
            .zip(&grads.data)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let g = g.f64();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            let pv = p.f64();
            let next = pv - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pv);
            *p = F::of(next);
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Model<F>, max_norm: f64) -> f64 {
    let norm = grads.data.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        grads.data.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
