//! AdamW with decoupled weight decay and a polynomial learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};
use riskseg_core::nn::ParamStore;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `lr0 * (1 - step / total)^power`, clamped at zero past the end.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr0 * (1.0 - frac).powf(power)
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this parameter; parameters without a gradient in a
    /// step are left alone and do not advance.
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient, at learning rate `lr`.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.cfg;
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let p = var.as_tensor().detach();
            let g = g.detach();
            if !self.state.contains_key(name) {
                let z = p.zeros_like()?;
                self.state.insert(name.clone(), Moments { m: z.clone(), v: z, steps: 0 });
            }
            let st = self.state.get_mut(name).unwrap();
            st.steps += 1;
            st.m = ((&st.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            st.v = ((&st.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            let denom = ((&st.v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&st.m / bc1)? / denom)?;
            let decayed = (&p * (1.0 - lr * c.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }
}
