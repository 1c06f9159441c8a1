//! AdamW and the warmup + cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay to
/// exactly 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup steps {warmup_steps} must lie in 1..={total_steps}"
            )));
        }
        Ok(Schedule { peak, warmup_steps, total_steps })
    }

    /// Schedule for `epochs` epochs of `steps_per_epoch` updates with the
    /// warmup spanning `warmup_fraction` of the first epoch.
    pub fn for_run(peak: f64, warmup_fraction: f64, steps_per_epoch: usize, epochs: usize) -> Result<Self> {
        let total = steps_per_epoch * epochs;
        let warmup = (libm::round(warmup_fraction * steps_per_epoch as f64) as usize).max(1).min(total.max(1));
        Self::new(peak, warmup, total.max(1))
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} is past the {} scheduled steps",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            if step == self.warmup_steps && step == self.total_steps {
                return Ok(0.0);
            }
            return Ok(self.peak * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, steps: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every trainable parameter present in `grads`. Weight
    /// decay applies to matrices and kernels (rank ≥ 2) only. Moments are
    /// kept in f64.
    pub fn step<R: Real>(&mut self, store: &mut ParamStore<R>, grads: &BTreeMap<ParamId, Tensor<R>>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let mut wf = w.as_f64();
                wf -= lr * decay * wf;
                wf -= lr * mhat / (libm::sqrt(vhat) + self.eps);
                *w = R::lit(wf);
            }
        }
    }
}

/// Global L2 norm over a gradient map.
pub fn grad_norm<R: Real>(grads: &BTreeMap<ParamId, Tensor<R>>) -> f64 {
    libm::sqrt(grads.values().flat_map(|g| g.data()).map(|&v| v.as_f64() * v.as_f64()).sum())
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<R: Real>(grads: &mut BTreeMap<ParamId, Tensor<R>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = R::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let s = Schedule::new(1e-4, 10, 110).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 1e-4);
        assert!((s.lr_at(60).unwrap() - 5e-5).abs() < 1e-18);
        assert!(s.lr_at(110).unwrap().abs() < 1e-20);
        assert!(matches!(s.lr_at(111), Err(Error::InvalidArgument(_))));
        assert!(Schedule::new(1e-4, 0, 10).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("b", Tensor::full(vec![2], 1.0));
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.05);
        opt.step(&mut store, &grads, 0.1);
        let d = store.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 1.1).abs() < 1e-6);
    }
}
