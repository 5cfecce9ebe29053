//! Decoupled-weight-decay Adam and the learning-rate / momentum schedules.

use crate::error::{Error, Result};
use crate::model::{ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    /// Desk scale. The reference run used lr 2e-4 at batch 512.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// EMA momentum ramped linearly from `start` to `end` over training.
pub fn momentum_at(step: u64, total: u64, start: f64, end: f64) -> f64 {
    let progress = (step as f64 / total.max(1) as f64).min(1.0);
    start + (end - start) * progress
}

pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter store. Rank-1 arrays (biases, norm gains,
/// mask tokens) are exempt from weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &ParamStore<F>,
        lr: f64,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        params.check_compatible(grads)?;
        params.check_compatible(&self.m)?;
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (fb1, fb2) = (F::of(b1), F::of(b2));
        let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(ADAM_EPS);
        let decay = F::of(1.0 - lr * cfg.weight_decay);

        let iter = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in iter {
            let decays = p.shape.len() > 1;
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *mi = fb1 * *mi + one_b1 * gi;
                *vi = fb2 * *vi + one_b2 * gi * gi;
                if decays {
                    *x *= decay;
                }
                *x -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
