//! AdamW with decoupled weight decay, cosine annealing and the μP learning
//! rate rule for factorized projections.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimState {
    pub fn new(params: &[&Tensor], config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `params[i]` pairs with `grads[i]`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Structure(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(dim_err!(
                    "param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                ));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let decay = 1.0 - lr * weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `eta_min + ½·(eta_base − eta_min)·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, eta_base: f64, eta_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Range(format!(
            "cosine schedule needs 0 ≤ step ≤ total and total ≥ 1, got {step}/{total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(eta_min + 0.5 * (eta_base - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// `eta_base · d_in / (M·r)`.
pub fn mup_scale_lr(eta_base: f64, d_in: u64, blocks: u64, rank: u64) -> Result<f64> {
    let denom = blocks
        .checked_mul(rank)
        .filter(|&d| d >= 1)
        .ok_or_else(|| Error::Range(format!("M·r must be ≥ 1, got M={blocks}, r={rank}")))?;
    Ok(eta_base * d_in as f64 / denom as f64)
}
