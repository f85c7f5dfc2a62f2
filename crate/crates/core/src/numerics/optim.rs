//! Adam with bias correction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
    /// Store updated parameters at `f32` precision.
    pub round_f32: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, round_f32: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen parameter of `store` that has a
    /// gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NumericsError> {
        for name in grads.names() {
            if !grads.get(name).is_some_and(Tensor::is_finite) {
                return Err(NumericsError::NonFinite(format!("gradient of {name}")));
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .filter(|p| !p.frozen)
                    .filter_map(|p| grads.get(&p.name))
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
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
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps, round_f32, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(NumericsError::ShapeMismatch(format!(
                    "gradient {:?} vs parameter {:?} for {}",
                    g.shape(),
                    p.value.shape(),
                    p.name
                )));
            }
            let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| {
                (Tensor::zeros(p.value.rows(), p.value.cols()), Tensor::zeros(p.value.rows(), p.value.cols()))
            });
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
                if round_f32 {
                    *w = *w as f32 as f64;
                }
            }
        }
        Ok(())
    }
}
