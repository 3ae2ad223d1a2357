use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real};

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<S: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<S>, Vec<S>)>,
}

impl<S: Real> Default for AdamW<S> {
    fn default() -> Self {
        Self::new(0.01)
    }
}

impl<S: Real> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Vec<S>)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let step_size = S::lit(lr / bc1);
        let decay = S::lit(1.0 - lr * self.weight_decay);
        let rbc2 = S::lit(1.0 / bc2);
        let eps = S::lit(self.eps);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![S::zero(); g.len()], vec![S::zero(); g.len()]));
            let p = store.data_mut(*id);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (S::one() - b1) * g[k];
                v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
                p[k] = p[k] * decay - step_size * m[k] / ((v[k] * rbc2).sqrt() + eps);
            }
        }
    }
}

/// Rescale gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<S: Real>(grads: &mut [(ParamId, Vec<S>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = S::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warmup to `lr_max`, then cosine annealing to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_max * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr_min;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
