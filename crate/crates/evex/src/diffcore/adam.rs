//! Adam optimizer with bias correction and per-group learning rates.

use super::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_encoder: 1e-3,
            lr_rest: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} moment buffers vs {} parameters", self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if self.m[i].len() != p.data.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter {}: {} values vs {} moment entries",
                        p.name,
                        p.data.len(),
                        self.m[i].len()
                    ),
                ));
            }
            let lr = match p.group {
                ParamGroup::Encoder => self.cfg.lr_encoder,
                ParamGroup::Rest => self.cfg.lr_rest,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((theta, g), (mi, vi)) in p
                .data
                .iter_mut()
                .zip(&p.grad_accum)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", vec![1], vec![theta], ParamGroup::Rest)
            .unwrap();
        s
    }

    #[test]
    fn first_step_bias_correction_identity() {
        // g=1, m=v=0, lr=0.1: update is -lr exactly up to eps.
        let mut store = store_with(0.0);
        store.get_mut(super::super::ParamId(0)).grad_accum[0] = 1.0;
        let mut adam = Adam::new(
            AdamConfig {
                lr_encoder: 0.1,
                lr_rest: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        adam.step(&mut store).unwrap();
        let theta = store.by_name("theta").unwrap().data[0];
        assert!((theta + 0.1).abs() < 1e-6, "theta = {}", theta);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = store_with(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.by_name("theta").unwrap().data[0], 1.5);
    }

    #[test]
    fn three_steps_decrease_quadratic() {
        let mut store = store_with(1.0);
        let mut adam = Adam::new(
            AdamConfig {
                lr_encoder: 0.1,
                lr_rest: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut prev = 1.0_f64.powi(2);
        for _ in 0..3 {
            let theta = store.by_name("theta").unwrap().data[0];
            store.get_mut(super::super::ParamId(0)).grad_accum[0] = 2.0 * theta;
            adam.step(&mut store).unwrap();
            store.zero_grads();
            let theta = store.by_name("theta").unwrap().data[0];
            let f = theta * theta;
            assert!(f < prev, "f(theta) did not decrease: {} -> {}", prev, f);
            prev = f;
        }
    }

    #[test]
    fn step_counter_increases_by_one() {
        let mut store = store_with(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for expect in 1..=5 {
            adam.step(&mut store).unwrap();
            assert_eq!(adam.step_count(), expect);
        }
    }
}
