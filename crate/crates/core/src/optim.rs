//! AdamW with decoupled weight decay and a step-decay learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{scalar, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    /// Linear warm-up length in steps.
    pub warmup_steps: u64,
    /// Steps after which the rate is multiplied by `gamma`.
    pub milestones: Vec<u64>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            warmup_steps: 0,
            milestones: Vec::new(),
            gamma: 0.5,
        }
    }
}

impl LrSchedule {
    /// Rate used for the update that produces step `step + 1`.
    pub fn at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let passed = self.milestones.iter().filter(|m| step >= **m).count() as i32;
        self.base * warm * self.gamma.powi(passed)
    }
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step_clipped(store, grads, lr, None).map(|_| ())
    }

    /// Global L2 norm of the gradients of the trainable parameters.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sum = 0.0;
        for (_, var) in store.trainable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sum += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(sum.sqrt())
    }

    /// Like [`AdamW::step`], first rescaling all gradients so their global
    /// norm is at most `max_norm`. Returns the norm before rescaling.
    pub fn step_clipped(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, max_norm: Option<f64>) -> Result<f64> {
        let norm = Self::grad_norm(store, grads)?;
        let scale = match max_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            let m = match self.first.get(&name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(&name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let theta = var.as_tensor().detach();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let next = ((theta * (1.0 - lr * self.weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name, v);
        }
        Ok(norm)
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`, plus the step count.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (n, t) in &self.first {
            out.insert(format!("m.{n}"), t.clone());
        }
        for (n, t) in &self.second {
            out.insert(format!("v.{n}"), t.clone());
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, tensors: BTreeMap<String, Tensor>) {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("m.") {
                self.first.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("v.") {
                self.second.insert(n.to_string(), t);
            }
        }
    }
}
