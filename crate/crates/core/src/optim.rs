//! Adam with bias correction, keyed by parameter name.

use indexmap::IndexMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::config("adapt.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::config("adapt.adam_beta", "must lie in [0, 1)"));
        }
        Ok(Self {
            config,
            state: IndexMap::new(),
        })
    }

    /// Parameters that have optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// One update of a single tensor in place.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
            ));
        }
        let c = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t as i32);
        let bc2 = 1.0 - c.beta2.powi(st.t as i32);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(&mut st.m)
            .zip(&mut st.v)
        {
            let g = g + c.weight_decay * *p;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Updates every parameter in `group`. A member without a gradient is
    /// stepped with a zero gradient so its moments keep decaying.
    pub fn step_model(&mut self, model: &mut Backbone, group: &[String], grads: &Gradients) -> Result<()> {
        for name in group {
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            let grad = match grads.by_name(name) {
                Some(g) => g.clone(),
                None => Tensor::zeros(param.shape()),
            };
            self.step(name, param, &grad)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -7.0, 1e-3]).unwrap();
        let before = p.clone();
        adam.step("w", &mut p, &g).unwrap();
        for ((a, b), gi) in p.data().iter().zip(before.data()).zip(g.data()) {
            let delta = a - b;
            assert!(delta.abs() <= 1e-3 * (1.0 + 1e-4));
            assert!(delta.abs() > 0.99e-3);
            assert_eq!(delta.signum(), -gi.signum());
        }
    }

    #[test]
    fn zero_gradient_keeps_param_and_decays_moments() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        adam.step("w", &mut p, &Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let (m1, v1) = (adam.moments("w").unwrap().m[0], adam.moments("w").unwrap().v[0]);
        let mut q = Tensor::new(vec![1], vec![5.0]).unwrap();
        let mut fresh = Adam::new(AdamConfig::default()).unwrap();
        fresh.step("w", &mut q, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(q.data()[0], 5.0);
        adam.step("w", &mut p, &Tensor::zeros(&[1])).unwrap();
        let st = adam.moments("w").unwrap();
        assert!((st.m[0] - 0.9 * m1).abs() < 1e-15);
        assert!((st.v[0] - 0.999 * v1).abs() < 1e-15);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn invalid_lr_rejected() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(cfg).is_err());
    }
}
