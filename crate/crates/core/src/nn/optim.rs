//! Adam and the cosine-annealing-with-warm-restarts learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Grads, ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Adam {
            config,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.v[id.0]
    }

    /// Rebuilds a state saved through [`Adam::first_moment`] / [`Adam::second_moment`].
    pub fn restore(
        store: &ParamStore<T>,
        lr: f64,
        config: AdamConfig,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} / {} moments for {} parameters",
                m.len(),
                v.len(),
                store.len()
            )));
        }
        for ((id, p), (mm, vv)) in store.iter().zip(m.iter().zip(&v)) {
            if mm.shape() != p.value.shape() || vv.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment shape mismatch for {} (parameter {})",
                    p.name, id.0
                )));
            }
        }
        Ok(Adam {
            config,
            lr,
            step,
            m,
            v,
        })
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        grads.check_finite(store)?;
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(eps);
        for i in 0..store.len() {
            let id = ParamId(i);
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts, evaluated per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub t0: u32,
    pub t_mult: u32,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            t0: 20,
            t_mult: 1,
            eta_min: 0.00007,
            eta_max: 0.0001,
        }
    }
}

impl CosineSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::Config("scheduler periods must be positive".into()));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::Config(format!(
                "scheduler needs 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        Ok(())
    }

    /// Position inside the current cycle and that cycle's length.
    fn cycle(&self, epoch: u64) -> (u64, u64) {
        let mut len = self.t0 as u64;
        let mut e = epoch;
        if self.t_mult == 1 {
            return (e % len, len);
        }
        while e >= len {
            e -= len;
            len *= self.t_mult as u64;
        }
        (e, len)
    }

    pub fn lr(&self, epoch: u64) -> f64 {
        let (t_cur, len) = self.cycle(epoch);
        let cos = (std::f64::consts::PI * t_cur as f64 / len as f64).cos();
        self.eta_min + (self.eta_max - self.eta_min) * (1.0 + cos) / 2.0
    }
}
