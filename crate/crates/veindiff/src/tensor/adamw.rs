//! AdamW with serializable moment state.
//!
//! Decoupled weight decay per Loshchilov & Hutter: the decay term is applied
//! directly to the parameter, not through the gradient moments. Moments are
//! plain tensors keyed by parameter name so a checkpoint can capture and
//! restore optimizer state bit-exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Result, VeinError};

struct Slot {
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: usize,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Apply one update. `groups` pairs a learning rate with the named
    /// parameters it covers; parameters without a gradient are skipped.
    pub fn step(&mut self, grads: &GradStore, groups: &[(f64, &[(String, Var)])]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (lr, params) in groups {
            for (name, var) in params.iter() {
                let Some(grad) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let grad = grad.detach();
                if !self.slots.contains_key(name) {
                    self.slots.insert(
                        name.clone(),
                        Slot {
                            m: grad.zeros_like()?,
                            v: grad.zeros_like()?,
                        },
                    );
                }
                let slot = self.slots.get_mut(name).expect("just inserted");
                slot.m = ((&slot.m * self.beta1)? + (&grad * (1.0 - self.beta1))?)?;
                slot.v = ((&slot.v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
                let m_hat = (&slot.m / bc1)?;
                let v_hat = (&slot.v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
                let p = var.as_tensor().detach();
                let decayed = (&p * (1.0 - lr * self.weight_decay))?;
                var.set(&(decayed - (update * *lr)?)?)?;
            }
        }
        Ok(())
    }

    /// Moment state as `(name, m, v)` triples for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor, Tensor)> {
        self.slots
            .iter()
            .map(|(name, s)| (name.clone(), s.m.clone(), s.v.clone()))
            .collect()
    }

    /// Restore moment state saved by [`Self::state`].
    pub fn load_state(
        &mut self,
        step_count: usize,
        state: Vec<(String, Tensor, Tensor)>,
    ) -> Result<()> {
        self.step_count = step_count;
        self.slots.clear();
        for (name, m, v) in state {
            if m.dims() != v.dims() {
                return Err(VeinError::checkpoint(format!(
                    "optimizer moment shape mismatch for {name}"
                )));
            }
            self.slots.insert(name, Slot { m, v });
        }
        Ok(())
    }
}
