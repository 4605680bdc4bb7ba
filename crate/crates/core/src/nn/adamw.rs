//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::{GradSet, ParamSet};
use super::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            v: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// One update. Weight decay is decoupled and applied only to tensors
    /// flagged in the parameter set's decay mask.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &GradSet) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let lr = self.cfg.learning_rate;
        let eps = self.cfg.eps;
        let decay_mask: Vec<bool> = params.decay_mask().to_vec();
        for (idx, param) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors()[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let wd = if decay_mask[idx] {
                self.cfg.weight_decay
            } else {
                0.0
            };
            for ((p, (mi, vi)), &gi) in param
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.iter())
            {
                let gi = gi as f64;
                let m_new = b1 * (*mi as f64) + (1.0 - b1) * gi;
                let v_new = b2 * (*vi as f64) + (1.0 - b2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                let pv = *p as f64;
                *p = (pv - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pv)) as f32;
            }
        }
    }
}
