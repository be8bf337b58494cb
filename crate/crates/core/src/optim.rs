//! Adam and the warm-up/step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::nn::{GradSet, ParamSet};
use crate::types::RunConfig;

/// Linear warm-up from `start` to `peak` over `warmup_steps`, then a single
/// multiplicative decay from `decay_step` on. Steps are one-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub warmup_steps: usize,
    pub decay_step: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            start: cfg.lr_start,
            peak: cfg.lr_peak,
            warmup_steps: cfg.warmup_steps,
            decay_step: cfg.decay_step,
            decay_factor: cfg.decay_factor,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        let step = step.max(1);
        if step >= self.decay_step {
            return self.peak * self.decay_factor;
        }
        if step >= self.warmup_steps {
            return self.peak;
        }
        let frac = (step - 1) as f64 / (self.warmup_steps - 1) as f64;
        self.start + (self.peak - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .blocks()
            .iter()
            .map(|b| Tensor::zeros(b.value.rows, b.value.cols))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Blocks with `frozen[i] == true` are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64, frozen: Option<&[bool]>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, block) in params.blocks_mut().iter_mut().enumerate() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = &grads.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..block.value.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                block.value.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_warmup_and_decay() {
        let s = LrSchedule::from_config(&RunConfig::default());
        assert_eq!(s.at(1), 1e-4);
        assert_eq!(s.at(10), 5e-4);
        assert_eq!(s.at(149), 5e-4);
        assert_eq!(s.at(150), 2.5e-4);
        assert_eq!(s.at(151), 2.5e-4);
        // strictly increasing during warm-up
        for step in 1..10 {
            assert!(s.at(step) < s.at(step + 1));
        }
        assert!((s.at(5) - (1e-4 + 4e-4 * 4.0 / 9.0)).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::from_vec(1, 3, vec![0.1, -0.2, 0.3]));
        let before = ps.clone();
        let mut grads = GradSet::zeros_like(&ps);
        grads.add_block(id, &Tensor::from_vec(1, 3, vec![1.0, 2.0, -3.0]));
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, &grads, 0.0, None);
        assert_eq!(ps, before);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::zeros(1, 2));
        let mut grads = GradSet::zeros_like(&ps);
        grads.add_block(id, &Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
