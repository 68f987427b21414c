//! Adam with bias correction and linear warmup.

use std::collections::BTreeMap;

use crate::numerics::{ParamSet, Tensor};
use crate::Result;

use super::TrainConfig;

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup_steps: usize,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, total_steps: usize) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            warmup_steps: ((total_steps as f64) * config.warmup_frac).ceil() as usize,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            self.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    /// Apply one update; missing moment buffers start at zero.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let lr = self.lr_at(self.step);
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3)
        let config = TrainConfig {
            learning_rate: 0.1,
            warmup_frac: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&config, 200);
        let mut params = ParamSet::new();
        params.insert("x", Tensor::scalar(0.0));
        for _ in 0..200 {
            let x = params.get("x").unwrap().data()[0];
            let grads = vec![("x".to_string(), Tensor::scalar(2.0 * (x - 3.0)))];
            adam.update(&mut params, &grads).unwrap();
        }
        let x = params.get("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 0.05, "x = {x}");
    }

    #[test]
    fn warmup_scales_early_steps() {
        let config = TrainConfig {
            learning_rate: 1.0,
            warmup_frac: 0.5,
            ..TrainConfig::default()
        };
        let adam = Adam::new(&config, 10); // warmup over 5 steps
        assert!((adam.lr_at(1) - 0.2).abs() < 1e-12);
        assert!((adam.lr_at(5) - 1.0).abs() < 1e-12);
        assert!((adam.lr_at(9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_is_deterministic() {
        let config = TrainConfig::default();
        let run = || {
            let mut adam = Adam::new(&config, 10);
            let mut params = ParamSet::new();
            params.insert("w", Tensor::vector(vec![1.0, -2.0]));
            for step in 0..10 {
                let g = Tensor::vector(vec![0.1 * step as f64, -0.2]);
                adam.update(&mut params, &[("w".to_string(), g)]).unwrap();
            }
            params.get("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
