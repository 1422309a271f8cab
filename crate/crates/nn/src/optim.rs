//! Adam with L2 weight decay folded into the gradient.

use crate::error::{NnError, Result};
use crate::params::{Parameter, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &Params, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated `grad`.
    pub fn step(&mut self, params: &mut Params, lr: f64, weight_decay: f64) -> Result<()> {
        self.step_filtered(params, lr, weight_decay, |_| true)
    }

    /// Like [`Adam::step`], restricted to trainable parameters accepted by
    /// `filter`. Rejected parameters keep their value and moments.
    pub fn step_filtered(
        &mut self,
        params: &mut Params,
        lr: f64,
        weight_decay: f64,
        filter: impl Fn(&Parameter) -> bool,
    ) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NnError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(NnError::InvalidArgument(format!(
                "weight decay must be ≥ 0, got {weight_decay}"
            )));
        }
        if self.m.len() != params.len() {
            return Err(NnError::InvalidArgument(
                "optimizer state was built for a different parameter set".into(),
            ));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, p) in params.iter_mut() {
            if !p.trainable || !filter(p) {
                continue;
            }
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j] + weight_decay * *w;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !p.value.is_finite() {
                return Err(NnError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(x: f64) -> Params {
        let mut p = Params::new();
        p.add("x", Tensor::scalar(x)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = scalar_params(0.7);
        let mut adam = Adam::new(&params, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut params, 1e-2, 0.0).unwrap();
        }
        assert_eq!(params.by_name("x").unwrap().value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = scalar_params(2.0);
        params.get_mut(params.id("x").unwrap()).grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.step(&mut params, 0.01, 0.0).unwrap();
        let x = params.by_name("x").unwrap().value.data()[0];
        // m̂ = 1, v̂ = 1 ⇒ Δ = −lr / (1 + ε)
        assert!((x - (2.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut params = scalar_params(1.0);
        let id = params.id("x").unwrap();
        let mut adam = Adam::new(&params, AdamConfig::default());
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = params.value(id).data()[0];
            params.get_mut(id).grad = Tensor::scalar(2.0 * x);
            adam.step(&mut params, 0.1, 0.0).unwrap();
            let now = params.value(id).data()[0];
            assert!(now.abs() < prev.abs());
            prev = now;
        }
    }

    #[test]
    fn weight_decay_acts_through_gradient() {
        let mut params = scalar_params(3.0);
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.step(&mut params, 0.1, 1e-4).unwrap();
        // g = 1e-4·3 > 0 ⇒ first step is −lr·g/(|g| + ε)
        let g: f64 = 3e-4;
        let x = params.by_name("x").unwrap().value.data()[0];
        assert!((x - (3.0 - 0.1 * g / (g + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut params = scalar_params(1.0);
        let mut adam = Adam::new(&params, AdamConfig::default());
        assert!(adam.step(&mut params, 0.0, 0.0).is_err());
        assert!(adam.step(&mut params, -1e-3, 0.0).is_err());
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut params = Params::new();
        let b = params.add_buffer("buf", Tensor::scalar(1.0)).unwrap();
        params.get_mut(b).grad = Tensor::scalar(5.0);
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.step(&mut params, 0.1, 0.0).unwrap();
        assert_eq!(params.value(b).data(), &[1.0]);
    }
}
