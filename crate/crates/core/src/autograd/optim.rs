use std::f64::consts::PI;

use super::params::{ParamKind, ParamStore};
use crate::{Error, Real, Result, Tensor};

/// Initial learning rate used for every run unless overridden.
pub const DEFAULT_LR: f64 = 5e-4;

/// Cosine decay from `lr0` at step 0 to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if !(lr0 > 0.0) {
        return Err(Error::LearningRate(lr0));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let progress = (step.min(total) as f64) / total as f64;
    Ok(0.5 * lr0 * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay applied to [`ParamKind::Weight`] only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update over every trainable parameter using its accumulated grad.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::LearningRate(lr));
        }
        if self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer holds state for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.kind == ParamKind::Weight {
                T::one() - lr_t * T::lit(c.weight_decay)
            } else {
                T::one()
            };
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let grad = p.grad.data();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *w *= decay;
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        store.enforce_constraints();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, DEFAULT_LR).unwrap(), 5e-4);
        assert!(cosine_lr(100, 100, 1e-3).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(10, 100, 0.0).is_err());
        assert!(cosine_lr(10, 100, -1.0).is_err());
    }

    #[test]
    fn one_step_on_quadratic() {
        // f(w) = (w - 3)^2 at w = 1: g = -4.
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(1.0), ParamKind::Weight);
        store.get_mut(id).grad = Tensor::scalar(-4.0);
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, 0.01).unwrap();
        // by hand: w = 1 * (1 - 0.01*0.1) = 0.999; m = -0.4, v = 0.016;
        // mhat = -4, vhat = 16; w -= 0.01 * (-4) / (4 + 1e-8)
        let want = 0.999 + 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((store.scalar(id) - want).abs() < 1e-15);
        assert!(opt.step(&mut store, 0.0).is_err());
    }

    #[test]
    fn frozen_and_scale_params() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(1e-4), ParamKind::Scale);
        let k = store.add_frozen("k", Tensor::full(&[9], 1.0));
        store.get_mut(a).grad = Tensor::scalar(10.0);
        store.get_mut(k).grad = Tensor::full(&[9], 5.0);
        let before = store.fingerprint(k);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(store.scalar(a), 1e-4);
        assert_eq!(store.fingerprint(k), before);
    }
}
