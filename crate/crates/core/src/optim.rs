//! AdamW with decoupled weight decay, warmup + cosine learning-rate schedule
//! and gradient accumulation.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moment of one parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        let i = id.index();
        Some((self.m.get(i)?.as_ref()?, self.v.get(i)?.as_ref()?))
    }

    /// One update of every trainable parameter that has a gradient.
    /// `grads` is indexed by parameter id.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.value(id).shape() {
                    return Err(Error::invalid(format!(
                        "gradient shape {:?} does not match parameter {} {:?}",
                        g.shape(),
                        params.get(id).name,
                        params.value(id).shape()
                    )));
                }
            }
        }
        self.m.resize(params.len(), None);
        self.v.resize(params.len(), None);
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in params.ids().zip(grads) {
            let Some(g) = g else { continue };
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = 1.0 - lr * c.weight_decay;
            for (((theta, &gi), mi), vi) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                let gi = gi as f64;
                let mn = c.beta1 * (*mi as f64) + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * (*vi as f64) + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let mhat = mn / bc1;
                let vhat = vn / bc2;
                let th = (*theta as f64) * decay - lr * mhat / (vhat.sqrt() + c.eps);
                *theta = th as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_fraction).round() as usize;
        LrSchedule { peak, total_steps, warmup_steps: warmup_steps.min(total_steps) }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let decay_len = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_len as f64).min(1.0);
        0.5 * self.peak * (1.0 + (core::f64::consts::PI * progress).cos())
    }
}

/// Running sum of parameter gradients over micro-batches.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    sum: Vec<Option<Tensor<f32>>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, grads: Vec<Option<Tensor<f32>>>) {
        if self.sum.len() < grads.len() {
            self.sum.resize(grads.len(), None);
        }
        for (slot, g) in self.sum.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(s), Some(g)) => s.data_mut().iter_mut().zip(g.data()).for_each(|(s, &x)| *s += x),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        self.count += 1;
    }

    pub fn sum(&self) -> &[Option<Tensor<f32>>] {
        &self.sum
    }

    /// Returns the mean gradient over the accumulated micro-batches and resets.
    pub fn take_mean(&mut self, n_params: usize) -> Vec<Option<Tensor<f32>>> {
        let inv = if self.count == 0 { 0.0 } else { 1.0 / self.count as f32 };
        let mut out = core::mem::take(&mut self.sum);
        out.resize(n_params, None);
        for t in out.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        self.count = 0;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(theta: f32) -> (ParamStore<f32>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(&[1, 1], theta), true);
        (s, id)
    }

    #[test]
    fn pure_decay_step() {
        let (mut s, id) = single(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut s, &[Some(Tensor::zeros(&[1, 1]))], 0.01).unwrap();
        let expected = 2.0 * (1.0 - 0.01 * 0.1);
        assert!((s.value(id).data()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected m̂ = 1, v̂ = 1, so Δθ = −η / (1 + ε)
        let (mut s, id) = single(0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, &[Some(Tensor::full(&[1, 1], 1.0))], 0.0002).unwrap();
        let oracle = -0.0002 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] as f64 - oracle).abs() < 1e-9);
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let run = || {
            let (mut s, _) = single(0.3);
            let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.01, ..Default::default() });
            for k in 0..5 {
                let g = Tensor::full(&[1, 1], 0.1 * k as f32 - 0.2);
                opt.step(&mut s, &[Some(g)], 0.001).unwrap();
            }
            s.value(ParamId(0)).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, _) = single(0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let r = opt.step(&mut s, &[Some(Tensor::zeros(&[2, 1]))], 0.1);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        assert!(opt.step(&mut s, &[], 0.1).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(2e-4, 120, 0.1);
        assert!(s.lr(0) < 0.1 * 2e-4);
        let max = (0..120).map(|i| s.lr(i)).fold(0.0, f64::max);
        assert!((max - 2e-4).abs() < 1e-9);
        for i in s.warmup_steps..119 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }

    #[test]
    fn accumulator_sums_and_averages() {
        let mut acc = GradAccumulator::new();
        for k in 1..=4 {
            acc.add(vec![Some(Tensor::full(&[1, 2], k as f32)), None]);
        }
        assert_eq!(acc.sum()[0].as_ref().unwrap().data(), &[10.0, 10.0]);
        let mean = acc.take_mean(2);
        assert_eq!(mean[0].as_ref().unwrap().data(), &[2.5, 2.5]);
        assert!(mean[1].is_none());
        assert_eq!(acc.count(), 0);
    }
}
