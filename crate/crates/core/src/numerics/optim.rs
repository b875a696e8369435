use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments<T: Real> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// AdamW with decoupled weight decay, applied after the adaptive step.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        AdamW {
            config,
            step: 0,
            moments: shapes
                .iter()
                .map(|s| Moments {
                    m: Tensor::zeros(s),
                    v: Tensor::zeros(s),
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    /// One update. `params` and `grads` are aligned with the shapes given at
    /// construction.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(shape_err!(
                "adamw: {} params / {} grads for {} slots",
                params.len(),
                grads.len(),
                self.moments.len()
            ));
        }
        if !(lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        for ((p, g), mo) in params.iter().zip(grads).zip(&self.moments) {
            if p.shape() != g.shape() || p.shape() != mo.m.shape() {
                return Err(shape_err!(
                    "adamw: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    mo.m.shape()
                ));
            }
            g.ensure_finite("gradient")?;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.as_f64();
                let m_new = c.beta1 * mi.as_f64() + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * vi.as_f64() + (1.0 - c.beta2) * gi * gi;
                *mi = T::lit(m_new);
                *vi = T::lit(v_new);
                let mhat = m_new / bc1;
                let vhat = v_new / bc2;
                let mut theta = pi.as_f64() - lr * mhat / (vhat.sqrt() + c.eps);
                theta -= lr * c.weight_decay * theta;
                *pi = T::lit(theta);
            }
        }
        Ok(())
    }
}

/// Linear warm-up followed by cosine decay, evaluated per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub floor_fraction: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 1e-3,
            warmup_epochs: 10,
            total_epochs: 200,
            floor_fraction: 0.1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "floor_fraction {} outside (0, 1]",
                self.floor_fraction
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside 0..{}",
                self.total_epochs
            )));
        }
        let base = self.base_lr;
        let floor = self.floor_fraction * base;
        if epoch < self.warmup_epochs {
            let frac = epoch as f64 / self.warmup_epochs as f64;
            return Ok(floor + (base - floor) * frac);
        }
        let decay_span = self.total_epochs - 1 - self.warmup_epochs.min(self.total_epochs - 1);
        if decay_span == 0 {
            return Ok(base);
        }
        let progress = (epoch - self.warmup_epochs) as f64 / decay_span as f64;
        Ok(floor + (base - floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
