use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction. Moments are kept as named matrices so they can
/// be checkpointed next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn restore(config: AdamConfig, step: u64, m: ParamStore, v: ParamStore) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&ParamStore, &ParamStore) {
        (&self.m, &self.v)
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name, Matrix::zeros(g.dim()));
                self.v.insert(name, Matrix::zeros(g.dim()));
            }
            let m = self.m.get_mut(name).expect("inserted above");
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g * scale);
            let v = self.v.get_mut(name).expect("inserted above");
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * (g * scale).powi(2));
            let (m, v) = (&self.m.get(name).expect("present").view(), &self.v.get(name).expect("present").view());
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}
